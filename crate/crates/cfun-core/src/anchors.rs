//! Anchor grid generation and training-target assignment.
//!
//! Anchors are cubes (ratio 1:1:1) centered on stride-aligned cell centers,
//! enumerated level -> (z, y, x) cell -> scale; RPN head outputs are
//! flattened in exactly this order. Assignment marks positives at IoU >= 0.5
//! (plus the argmax anchor unconditionally) and samples negatives from
//! IoU < 0.1 at a neg:pos ratio of 1:2.

use crate::boxes::{encode_box, iou_3d, BBox3D, BoxDelta};
use crate::rng::SplitMix64;
use thiserror::Error;

pub const POSITIVE_IOU: f32 = 0.5;
pub const NEGATIVE_IOU: f32 = 0.1;
/// Literal reading of the stated "negative and positive bounding box ratio
/// is 1:2": one negative per two positives.
pub const NEG_PER_POS_NUM: usize = 1;
pub const NEG_PER_POS_DEN: usize = 2;

#[derive(Debug, Error)]
pub enum AnchorError {
    #[error("empty scale list")]
    EmptyScales,
    #[error("level shapes and strides differ in length")]
    LevelMismatch,
}

/// All anchors of a feature pyramid, with their owning level.
#[derive(Debug, Clone)]
pub struct AnchorSet {
    pub boxes: Vec<BBox3D>,
    pub level_of: Vec<usize>,
    /// per-level anchor count, in order
    pub per_level: Vec<usize>,
}

pub fn generate_anchors(
    level_shapes: &[[usize; 3]],
    strides: &[usize],
    scales: &[f32],
) -> Result<AnchorSet, AnchorError> {
    if scales.is_empty() {
        return Err(AnchorError::EmptyScales);
    }
    if level_shapes.len() != strides.len() {
        return Err(AnchorError::LevelMismatch);
    }
    let mut boxes = Vec::new();
    let mut level_of = Vec::new();
    let mut per_level = Vec::new();
    for (level, (shape, &stride)) in level_shapes.iter().zip(strides).enumerate() {
        let before = boxes.len();
        for z in 0..shape[0] {
            for y in 0..shape[1] {
                for x in 0..shape[2] {
                    let center = [
                        (z as f32 + 0.5) * stride as f32,
                        (y as f32 + 0.5) * stride as f32,
                        (x as f32 + 0.5) * stride as f32,
                    ];
                    for &scale in scales {
                        boxes.push(BBox3D::cube(center, scale));
                        level_of.push(level);
                    }
                }
            }
        }
        per_level.push(boxes.len() - before);
    }
    Ok(AnchorSet {
        boxes,
        level_of,
        per_level,
    })
}

/// Per-anchor training targets; `labels[i]` is +1 positive, -1 negative,
/// 0 ignored. `deltas[i]` is set exactly for positives.
#[derive(Debug, Clone)]
pub struct AnchorTargets {
    pub labels: Vec<i8>,
    pub deltas: Vec<Option<BoxDelta>>,
    pub num_pos: usize,
    pub num_neg: usize,
}

pub fn assign_anchor_targets(
    anchors: &AnchorSet,
    gt: &BBox3D,
    rng: &mut SplitMix64,
) -> AnchorTargets {
    let n = anchors.boxes.len();
    let ious: Vec<f32> = anchors.boxes.iter().map(|a| iou_3d(a, gt)).collect();
    let mut labels = vec![0i8; n];
    let argmax = ious
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
        .map(|(i, _)| i)
        .expect("nonempty anchor set");
    for (i, &iou) in ious.iter().enumerate() {
        if iou >= POSITIVE_IOU {
            labels[i] = 1;
        }
    }
    labels[argmax] = 1;
    let num_pos = labels.iter().filter(|&&l| l == 1).count();
    let want_neg = (num_pos * NEG_PER_POS_NUM).div_ceil(NEG_PER_POS_DEN);
    let mut candidates: Vec<usize> = (0..n)
        .filter(|&i| labels[i] == 0 && ious[i] < NEGATIVE_IOU)
        .collect();
    // partial Fisher-Yates draw of `want_neg` negatives
    let take = want_neg.min(candidates.len());
    for k in 0..take {
        let j = k + rng.below(candidates.len() - k);
        candidates.swap(k, j);
        labels[candidates[k]] = -1;
    }
    let num_neg = take;
    let deltas = labels
        .iter()
        .enumerate()
        .map(|(i, &l)| (l == 1).then(|| encode_box(&anchors.boxes[i], gt)))
        .collect();
    AnchorTargets {
        labels,
        deltas,
        num_pos,
        num_neg,
    }
}
