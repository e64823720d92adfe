//! Heart detection network: P3D backbone, FPN, RPN heads, proposal
//! post-processing, single-box selection, and the refine head.
//!
//! The backbone downsamples by 4/8/16; an FPN merges the three stages
//! top-down into equal-width levels. A shared RPN head scores two cubic
//! anchors per cell on every level. Proposals are decoded, clipped,
//! capped per level, run through NMS, and reduced to exactly one box; the
//! refine head re-scores and re-regresses that box from RoI-aligned FPN
//! features.

use crate::anchors::AnchorSet;
use crate::boxes::{decode_box, nms_3d, BBox3D, BoxDelta, Proposal};
use crate::graph::{Graph, Var};
use crate::kernels::{ConvSpec, RoiAlignSpec};
use crate::layers::{conv, init_conv, init_linear, init_p3d, linear, p3d_bottleneck};
use crate::params::ParamStore;
use crate::rng::SplitMix64;
use ndarray::Ix2;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const DETECT_THRESHOLD: f32 = 0.5;
pub const PRE_NMS_TOP_PER_LEVEL: usize = 100;
pub const NMS_IOU_THRESH: f32 = 0.3;
pub const REFINE_ROI_SIZE: usize = 7;

#[derive(Debug, Error)]
pub enum DetectorError {
    #[error("input dims {0:?} not divisible by 16")]
    IndivisibleInput([usize; 3]),
    #[error("empty proposal list")]
    EmptyProposals,
    #[error("selected box degenerate after clipping")]
    DegenerateBox,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DetectorConfig {
    pub stem_channels: usize,
    pub stage_channels: [usize; 3],
    pub fpn_channels: usize,
    pub scales: Vec<f32>,
    pub strides: [usize; 3],
}

impl DetectorConfig {
    pub fn desk() -> Self {
        Self {
            stem_channels: 4,
            stage_channels: [8, 16, 32],
            fpn_channels: 8,
            scales: vec![24.0, 40.0],
            strides: [4, 8, 16],
        }
    }

    pub fn paper() -> Self {
        Self {
            stem_channels: 8,
            stage_channels: [16, 32, 64],
            fpn_channels: 16,
            scales: vec![64.0, 128.0],
            strides: [4, 8, 16],
        }
    }

    pub fn level_shapes(&self, input: [usize; 3]) -> Vec<[usize; 3]> {
        self.strides
            .iter()
            .map(|&s| [input[0] / s, input[1] / s, input[2] / s])
            .collect()
    }
}

/// FPN output: one graph node per stride in {4, 8, 16}, fine to coarse.
pub struct FeaturePyramid {
    pub levels: Vec<Var>,
}

pub fn init_detector(store: &mut ParamStore, rng: &mut SplitMix64, cfg: &DetectorConfig) {
    let [c1, c2, c3] = cfg.stage_channels;
    let f = cfg.fpn_channels;
    init_conv(store, rng, "bb.stem", 1, cfg.stem_channels, [3, 3, 3], true);
    init_p3d(store, rng, "bb.s1", cfg.stem_channels, c1, 2);
    init_p3d(store, rng, "bb.s2", c1, c2, 2);
    init_p3d(store, rng, "bb.s3", c2, c3, 2);
    init_conv(store, rng, "fpn.lat1", c1, f, [1, 1, 1], false);
    init_conv(store, rng, "fpn.lat2", c2, f, [1, 1, 1], false);
    init_conv(store, rng, "fpn.lat3", c3, f, [1, 1, 1], false);
    for name in ["fpn.smooth1", "fpn.smooth2", "fpn.smooth3"] {
        init_conv(store, rng, name, f, f, [3, 3, 3], false);
    }
    let a = cfg.scales.len();
    init_conv(store, rng, "rpn.shared", f, f, [3, 3, 3], false);
    init_conv(store, rng, "rpn.cls", f, a, [1, 1, 1], false);
    init_conv(store, rng, "rpn.delta", f, 6 * a, [1, 1, 1], false);
    init_conv(store, rng, "rf.conv", f, f, [3, 3, 3], false);
    init_linear(store, rng, "rf.fc1", f * REFINE_ROI_SIZE.pow(3), 64);
    init_linear(store, rng, "rf.fc2", 64, 7);
}

pub fn backbone_fpn_forward(
    g: &mut Graph,
    store: &ParamStore,
    cfg: &DetectorConfig,
    x: Var,
) -> Result<FeaturePyramid, DetectorError> {
    let shape = g.value(x).shape().to_vec();
    let dims = [shape[1], shape[2], shape[3]];
    if dims.iter().any(|d| d % 16 != 0) {
        return Err(DetectorError::IndivisibleInput(dims));
    }
    let [c1, c2, c3] = cfg.stage_channels;
    let s2 = ConvSpec {
        stride: [2, 2, 2],
        pad: [1, 1, 1],
    };
    let stem = conv(g, store, "bb.stem", x, s2, true, true);
    let f1 = p3d_bottleneck(g, store, "bb.s1", stem, cfg.stem_channels, c1, 2);
    let f2 = p3d_bottleneck(g, store, "bb.s2", f1, c1, c2, 2);
    let f3 = p3d_bottleneck(g, store, "bb.s3", f2, c2, c3, 2);
    let lat1 = conv(g, store, "fpn.lat1", f1, ConvSpec::unit(), false, false);
    let lat2 = conv(g, store, "fpn.lat2", f2, ConvSpec::unit(), false, false);
    let p3 = conv(g, store, "fpn.lat3", f3, ConvSpec::unit(), false, false);
    let up3 = g.upsample(p3, [dims[0] / 8, dims[1] / 8, dims[2] / 8]);
    let p2 = g.add(lat2, up3);
    let up2 = g.upsample(p2, [dims[0] / 4, dims[1] / 4, dims[2] / 4]);
    let p1 = g.add(lat1, up2);
    let same = ConvSpec::same3([1, 1, 1]);
    let p1 = conv(g, store, "fpn.smooth1", p1, same, false, false);
    let p2 = conv(g, store, "fpn.smooth2", p2, same, false, false);
    let p3 = conv(g, store, "fpn.smooth3", p3, same, false, false);
    Ok(FeaturePyramid {
        levels: vec![p1, p2, p3],
    })
}

/// Per-anchor objectness logits (N, 1) and box deltas (N, 6), flattened in
/// anchor-generation order: level -> (z, y, x) cell -> scale.
pub fn rpn_forward(
    g: &mut Graph,
    store: &ParamStore,
    cfg: &DetectorConfig,
    pyr: &FeaturePyramid,
) -> (Var, Var) {
    let mut score_parts = Vec::new();
    let mut delta_parts = Vec::new();
    for &level in &pyr.levels {
        let h = conv(
            g,
            store,
            "rpn.shared",
            level,
            ConvSpec::same3([1, 1, 1]),
            false,
            true,
        );
        let cls = conv(g, store, "rpn.cls", h, ConvSpec::unit(), false, false);
        let deltas = conv(g, store, "rpn.delta", h, ConvSpec::unit(), false, false);
        score_parts.push(g.anchor_flatten(cls, 1));
        delta_parts.push(g.anchor_flatten(deltas, 6));
    }
    let scores = g.concat_rows(&score_parts);
    let deltas = g.concat_rows(&delta_parts);
    (scores, deltas)
}

fn sigmoid(z: f32) -> f32 {
    1.0 / (1.0 + (-z).exp())
}

/// Decodes, clips, caps per level, and NMS-filters the RPN output into
/// scored proposals (descending score).
pub fn make_proposals(
    g: &Graph,
    scores: Var,
    deltas: Var,
    anchors: &AnchorSet,
    input_dims: [usize; 3],
) -> Vec<Proposal> {
    let s = g
        .value(scores)
        .view()
        .into_dimensionality::<Ix2>()
        .expect("2D scores");
    let d = g
        .value(deltas)
        .view()
        .into_dimensionality::<Ix2>()
        .expect("2D deltas");
    assert_eq!(s.nrows(), anchors.boxes.len());
    let mut candidates = Vec::new();
    let mut offset = 0;
    for &count in &anchors.per_level {
        let mut idx: Vec<usize> = (offset..offset + count).collect();
        idx.sort_by(|&a, &b| s[[b, 0]].partial_cmp(&s[[a, 0]]).unwrap().then(a.cmp(&b)));
        for &i in idx.iter().take(PRE_NMS_TOP_PER_LEVEL) {
            let delta = BoxDelta::from_array([
                d[[i, 0]],
                d[[i, 1]],
                d[[i, 2]],
                d[[i, 3]],
                d[[i, 4]],
                d[[i, 5]],
            ]);
            let decoded = decode_box(&anchors.boxes[i], &delta);
            if let Some(clipped) = decoded.clip(input_dims) {
                candidates.push(Proposal {
                    bbox: clipped,
                    score: sigmoid(s[[i, 0]]),
                });
            }
        }
        offset += count;
    }
    nms_3d(&candidates, NMS_IOU_THRESH)
}

/// The single selected box plus its below-threshold flag.
#[derive(Debug, Clone, Copy)]
pub struct SelectedBox {
    pub proposal: Proposal,
    pub low_confidence: bool,
}

/// Exactly one box for any nonempty proposal list: the highest-scoring
/// survivor, flagged when its score falls below `threshold`.
pub fn select_heart_box(
    proposals: &[Proposal],
    threshold: f32,
) -> Result<SelectedBox, DetectorError> {
    let best = proposals
        .iter()
        .enumerate()
        .max_by(|(ia, a), (ib, b)| a.score.partial_cmp(&b.score).unwrap().then(ib.cmp(ia)))
        .map(|(_, p)| *p)
        .ok_or(DetectorError::EmptyProposals)?;
    Ok(SelectedBox {
        proposal: best,
        low_confidence: best.score < threshold,
    })
}

/// The coarsest pyramid level whose stride fits inside the box: largest
/// stride <= the box's smallest side, falling back to the finest level.
pub fn refine_level(cfg: &DetectorConfig, bbox: &BBox3D) -> usize {
    let min_side = bbox.size().iter().fold(f32::INFINITY, |a, &b| a.min(b));
    let mut level = 0;
    for (i, &s) in cfg.strides.iter().enumerate() {
        if (s as f32) <= min_side {
            level = i;
        }
    }
    level
}

/// RoI-aligns the chosen FPN level under `bbox` to 7^3 and runs the refine
/// head; returns (cls logit [1], refinement delta [6]).
pub fn refine_forward(
    g: &mut Graph,
    store: &ParamStore,
    cfg: &DetectorConfig,
    pyr: &FeaturePyramid,
    bbox: &BBox3D,
) -> (Var, Var) {
    let level = refine_level(cfg, bbox);
    let stride = cfg.strides[level] as f32;
    let scaled = BBox3D {
        z1: bbox.z1 / stride,
        y1: bbox.y1 / stride,
        x1: bbox.x1 / stride,
        z2: bbox.z2 / stride,
        y2: bbox.y2 / stride,
        x2: bbox.x2 / stride,
    };
    let roi = g.roi_align(
        pyr.levels[level],
        scaled,
        RoiAlignSpec::cube(REFINE_ROI_SIZE),
    );
    let h = conv(
        g,
        store,
        "rf.conv",
        roi,
        ConvSpec::same3([1, 1, 1]),
        false,
        true,
    );
    let flat = g.flatten(h);
    let fc1 = linear(g, store, "rf.fc1", flat, true);
    let out = linear(g, store, "rf.fc2", fc1, false);
    let logit = g.slice1(out, 0, 1);
    let delta = g.slice1(out, 1, 6);
    (logit, delta)
}

/// Applies a refine-head delta to the selected box and clips it.
pub fn apply_refinement(
    bbox: &BBox3D,
    delta: &BoxDelta,
    input_dims: [usize; 3],
) -> Result<BBox3D, DetectorError> {
    decode_box(bbox, delta)
        .clip(input_dims)
        .ok_or(DetectorError::DegenerateBox)
}
