//! The four training losses and their weighted combination.
//!
//! Pure-function forms live here for oracle testing and the verification
//! harness; training uses the differentiable twins in [`crate::graph`],
//! which are pinned to these values by unit tests. The edge loss itself is
//! in [`crate::sobel`].

use crate::volume::{LabelVolume, SegKind, SegMap};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum LossError {
    #[error("shape mismatch: logits {0:?} vs labels {1:?}")]
    ShapeMismatch(Vec<usize>, Vec<usize>),
    #[error("expected logits, got {0:?}")]
    NotLogits(SegKind),
    #[error("all anchors ignored")]
    AllIgnored,
    #[error("zero positive anchors")]
    NoPositives,
    #[error("non-finite loss part {0}")]
    NonFinite(&'static str),
    #[error("loss weights are all zero")]
    ZeroWeights,
}

/// The w1..w4 mix (box, cls, seg, edge); defaults to the 2:2:2:1 ratio.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct LossWeights {
    pub w1: f32,
    pub w2: f32,
    pub w3: f32,
    pub w4: f32,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            w1: 2.0,
            w2: 2.0,
            w3: 2.0,
            w4: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<(), LossError> {
        let ws = [self.w1, self.w2, self.w3, self.w4];
        if ws.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(LossError::NonFinite("weights"));
        }
        if ws.iter().all(|&w| w == 0.0) {
            return Err(LossError::ZeroWeights);
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct LossReport {
    pub l_box: f32,
    pub l_cls: f32,
    pub l_seg: f32,
    pub l_edge: f32,
    pub total: f32,
}

/// total = w1 l_box + w2 l_cls + w3 l_seg + w4 l_edge.
pub fn total_loss(
    l_box: f32,
    l_cls: f32,
    l_seg: f32,
    l_edge: f32,
    w: &LossWeights,
) -> Result<LossReport, LossError> {
    w.validate()?;
    for (v, name) in [
        (l_box, "l_box"),
        (l_cls, "l_cls"),
        (l_seg, "l_seg"),
        (l_edge, "l_edge"),
    ] {
        if !v.is_finite() {
            return Err(LossError::NonFinite(name));
        }
    }
    let total = w.w1 * l_box + w.w2 * l_cls + w.w3 * l_seg + w.w4 * l_edge;
    Ok(LossReport {
        l_box,
        l_cls,
        l_seg,
        l_edge,
        total,
    })
}

/// Mean per-voxel cross-entropy of softmax(logits) against integer labels.
pub fn seg_loss(logits: &SegMap, labels: &LabelVolume) -> Result<f32, LossError> {
    if logits.kind != SegKind::Logits {
        return Err(LossError::NotLogits(logits.kind));
    }
    let (c_n, d, h, w) = logits.data.dim();
    if (d, h, w) != labels.data.dim() {
        return Err(LossError::ShapeMismatch(
            logits.data.shape().to_vec(),
            labels.data.shape().to_vec(),
        ));
    }
    let mut total = 0.0f64;
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                let mut mx = f32::NEG_INFINITY;
                for c in 0..c_n {
                    mx = mx.max(logits.data[[c, z, y, x]]);
                }
                let mut lse = 0.0f32;
                for c in 0..c_n {
                    lse += (logits.data[[c, z, y, x]] - mx).exp();
                }
                let lse = lse.ln() + mx;
                let lab = labels.data[[z, y, x]] as usize;
                total += (lse - logits.data[[lab, z, y, x]]) as f64;
            }
        }
    }
    Ok((total / (d * h * w) as f64) as f32)
}

/// Mean binary cross-entropy over non-ignored entries; `targets[i]` is
/// `Some(1.0)` for positives, `Some(0.0)` for negatives, `None` ignored.
pub fn cls_loss(logits: &[f32], targets: &[Option<f32>]) -> Result<f32, LossError> {
    assert_eq!(logits.len(), targets.len());
    let mut total = 0.0f64;
    let mut n = 0usize;
    for (&z, t) in logits.iter().zip(targets) {
        let Some(t) = t else { continue };
        total += (z.max(0.0) - z * t + (-z.abs()).exp().ln_1p()) as f64;
        n += 1;
    }
    if n == 0 {
        return Err(LossError::AllIgnored);
    }
    Ok((total / n as f64) as f32)
}

/// Smooth-L1 with transition 1, averaged over positive rows x 6 coordinates.
pub fn box_loss(
    pred: &[[f32; 6]],
    target: &[[f32; 6]],
    positive: &[bool],
) -> Result<f32, LossError> {
    assert_eq!(pred.len(), target.len());
    assert_eq!(pred.len(), positive.len());
    let mut total = 0.0f64;
    let mut n = 0usize;
    for ((p, t), &pos) in pred.iter().zip(target).zip(positive) {
        if !pos {
            continue;
        }
        n += 1;
        for c in 0..6 {
            let d = p[c] - t[c];
            total += if d.abs() < 1.0 {
                0.5 * d * d
            } else {
                d.abs() - 0.5
            } as f64;
        }
    }
    if n == 0 {
        return Err(LossError::NoPositives);
    }
    Ok((total / (6 * n) as f64) as f32)
}
