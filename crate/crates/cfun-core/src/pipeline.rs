//! End-to-end training (two-phase schedule), single-pass inference, Dice
//! evaluation, and the ablation harness.
//!
//! Training phase 1 optimizes the box/cls/seg mix; phase 2 adds the edge
//! term. Each step runs the detector on one full volume, supervises the
//! RPN against assigned anchors and the refine head against the selected
//! proposal, crops the configured input source under the segmentation box,
//! and supervises the U-net at the 2x output grid. Early in phase 1 the
//! segmentation branch is teacher-forced to a jittered ground-truth box so
//! the U-net never trains on pure-noise proposals.

use crate::anchors::{assign_anchor_targets, generate_anchors, AnchorError, AnchorSet};
use crate::boxes::{encode_box, iou_3d, BBox3D, BoxDelta, Proposal};
use crate::detector::{
    apply_refinement, backbone_fpn_forward, init_detector, make_proposals, refine_forward,
    refine_level, rpn_forward, select_heart_box, DetectorConfig, DetectorError, DETECT_THRESHOLD,
};
use crate::graph::{Graph, Var};
use crate::kernels::{ConvSpec, RoiAlignSpec};
use crate::layers::conv;
use crate::loss::{LossReport, LossWeights};
use crate::params::{ParamError, ParamStore};
use crate::phantom::{Manifest, PhantomError, CLASS_NAMES, NUM_STRUCTURES};
use crate::rng::SplitMix64;
use crate::unet::{init_unet, predict_probs, unet_forward, UnetConfig, UnetError, NUM_CLASSES};
use crate::volume::{
    argmax_labels, load_labels, load_volume, normalize_intensity, one_hot, resample_labels_nearest,
    resample_trilinear, LabelVolume, SegKind, SegMap, Volume, VolumeError,
};
use ndarray::{Array3, Array4, Axis};
use serde::{Deserialize, Serialize};
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;
use thiserror::Error;

/// Teacher forcing covers this fraction of phase-1 steps.
pub const TEACHER_FORCING_FRACTION: f64 = 0.5;
/// Ground-truth box jitter amplitude during teacher forcing (fraction of
/// the box side per coordinate).
pub const TEACHER_JITTER: f32 = 0.1;
/// Predicted boxes with any side below this fall back to the ground-truth
/// box during training (the crop would carry no usable context).
pub const MIN_SEG_BOX_SIDE: f32 = 4.0;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("training diverged at step {step}: non-finite total loss")]
    Diverged { step: usize },
    #[error("manifest has {0} samples, need at least {1}")]
    TooFewSamples(usize, usize),
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("label shape {0:?} does not match {1:?}")]
    ShapeMismatch([usize; 3], [usize; 3]),
    #[error("unknown variant {0:?}; valid: {valid}", valid = VARIANT_NAMES.join(", "))]
    UnknownVariant(String),
    #[error(transparent)]
    Phantom(#[from] PhantomError),
    #[error(transparent)]
    Volume(#[from] VolumeError),
    #[error(transparent)]
    Detector(#[from] DetectorError),
    #[error(transparent)]
    Unet(#[from] UnetError),
    #[error(transparent)]
    Param(#[from] ParamError),
    #[error(transparent)]
    Anchor(#[from] AnchorError),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

fn io_err(path: &Path, source: std::io::Error) -> PipelineError {
    PipelineError::Io {
        path: path.display().to_string(),
        source,
    }
}

// ---------------------------------------------------------------------------
// Variants
// ---------------------------------------------------------------------------

/// Ablation arms: the full model, the loss/head ablations, and the three
/// candidate crop sources for the segmentation stage.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Variant {
    #[serde(rename = "full")]
    Full,
    #[serde(rename = "no_edge")]
    NoEdge,
    #[serde(rename = "no_refine")]
    NoRefine,
    /// Crop the aligned original image (the default full model also uses
    /// this source; the arm exists so the input study can name it).
    #[serde(rename = "input_IO")]
    InputIo,
    /// Crop the first backbone conv stage's tensor.
    #[serde(rename = "input_IC")]
    InputIc,
    /// Crop the matched FPN level's tensor.
    #[serde(rename = "input_IP")]
    InputIp,
}

pub const VARIANT_NAMES: [&str; 6] = [
    "full",
    "no_edge",
    "no_refine",
    "input_IO",
    "input_IC",
    "input_IP",
];

impl Variant {
    pub fn name(&self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoEdge => "no_edge",
            Variant::NoRefine => "no_refine",
            Variant::InputIo => "input_IO",
            Variant::InputIc => "input_IC",
            Variant::InputIp => "input_IP",
        }
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Variant {
    type Err = PipelineError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "full" => Ok(Variant::Full),
            "no_edge" => Ok(Variant::NoEdge),
            "no_refine" => Ok(Variant::NoRefine),
            "input_IO" => Ok(Variant::InputIo),
            "input_IC" => Ok(Variant::InputIc),
            "input_IP" => Ok(Variant::InputIp),
            other => Err(PipelineError::UnknownVariant(other.to_string())),
        }
    }
}

// ---------------------------------------------------------------------------
// Config
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    /// Working resolution (D, H, W); every volume is resampled to this.
    pub input_shape: [usize; 3],
    /// RoI-align crop size fed to the U-net (cube side).
    pub roi_size: usize,
    pub detector: DetectorConfig,
    pub unet: UnetConfig,
    pub lr: f32,
    pub batch_size: usize,
    pub steps_per_epoch: usize,
    /// Phase-1 epochs (no edge term).
    pub base_epochs: usize,
    /// Phase-2 epochs (edge term added).
    pub edge_epochs: usize,
    pub weights: LossWeights,
    pub grad_clip: f32,
    pub seed: u64,
}

impl TrainConfig {
    /// Phantom-scale preset: 128x128x96 working grid, 32^3 RoI, epochs
    /// sized so the two phases total ~3000 steps at the paper's 3:1 split.
    pub fn desk() -> Self {
        Self {
            input_shape: [96, 128, 128],
            roi_size: 32,
            detector: DetectorConfig::desk(),
            unet: UnetConfig::desk(),
            lr: 1e-3,
            batch_size: 1,
            steps_per_epoch: 32,
            base_epochs: 72,
            edge_epochs: 24,
            weights: LossWeights::default(),
            grad_clip: 10.0,
            seed: 0,
        }
    }

    /// Full-scale preset: 320x320x192 input, 64^3 RoI, 300 + 100 epochs of
    /// 32 steps at lr 0.001 and batch size 1.
    pub fn paper() -> Self {
        Self {
            input_shape: [192, 320, 320],
            roi_size: 64,
            detector: DetectorConfig::paper(),
            unet: UnetConfig::paper(),
            lr: 1e-3,
            batch_size: 1,
            steps_per_epoch: 32,
            base_epochs: 300,
            edge_epochs: 100,
            weights: LossWeights::default(),
            grad_clip: 10.0,
            seed: 0,
        }
    }

    pub fn total_steps(&self) -> usize {
        (self.base_epochs + self.edge_epochs) * self.steps_per_epoch
    }

    pub fn phase1_steps(&self) -> usize {
        self.base_epochs * self.steps_per_epoch
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        if self.input_shape.iter().any(|&d| d % 16 != 0 || d == 0) {
            return Err(PipelineError::InvalidConfig(format!(
                "input_shape {:?} must be nonzero and divisible by 16",
                self.input_shape
            )));
        }
        let div = 1usize << self.unet.depth;
        if self.roi_size == 0 || self.roi_size % div != 0 {
            return Err(PipelineError::InvalidConfig(format!(
                "roi_size {} must be divisible by 2^depth = {div}",
                self.roi_size
            )));
        }
        if self.batch_size != 1 {
            return Err(PipelineError::InvalidConfig(
                "only batch_size 1 is supported".into(),
            ));
        }
        if !(self.lr > 0.0) || !(self.grad_clip > 0.0) {
            return Err(PipelineError::InvalidConfig(
                "lr and grad_clip must be positive".into(),
            ));
        }
        if self.steps_per_epoch == 0 || self.base_epochs + self.edge_epochs == 0 {
            return Err(PipelineError::InvalidConfig(
                "at least one training step required".into(),
            ));
        }
        self.weights
            .validate()
            .map_err(|e| PipelineError::InvalidConfig(e.to_string()))
    }
}

/// The U-net's input channel count follows the crop source.
pub fn unet_in_channels(cfg: &TrainConfig, variant: Variant) -> usize {
    match variant {
        Variant::InputIc => cfg.detector.stem_channels,
        Variant::InputIp => cfg.detector.fpn_channels,
        _ => cfg.unet.in_channels,
    }
}

fn adapted_unet(cfg: &TrainConfig, variant: Variant) -> UnetConfig {
    let mut u = cfg.unet.clone();
    u.in_channels = unet_in_channels(cfg, variant);
    u
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub config: TrainConfig,
    pub variant: Variant,
}

pub fn save_checkpoint(
    store: &ParamStore,
    meta: &CheckpointMeta,
    dir: &Path,
) -> Result<(), PipelineError> {
    std::fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    store.save(dir)?;
    let path = dir.join("config.json");
    let text = serde_json::to_string_pretty(meta).expect("meta serializes");
    std::fs::write(&path, text).map_err(|e| io_err(&path, e))?;
    Ok(())
}

pub fn load_checkpoint(dir: &Path) -> Result<(ParamStore, CheckpointMeta), PipelineError> {
    let store = ParamStore::load(dir)?;
    let path = dir.join("config.json");
    let text = std::fs::read_to_string(&path).map_err(|e| io_err(&path, e))?;
    let meta: CheckpointMeta = serde_json::from_str(&text).map_err(|e| PipelineError::Io {
        path: path.display().to_string(),
        source: std::io::Error::new(std::io::ErrorKind::InvalidData, e),
    })?;
    Ok((store, meta))
}

// ---------------------------------------------------------------------------
// Samples and box/label plumbing
// ---------------------------------------------------------------------------

struct TrainSample {
    image: Array4<f32>,
    labels: LabelVolume,
    gt: BBox3D,
}

fn scale_box(b: &BBox3D, from: [usize; 3], to: [usize; 3]) -> BBox3D {
    let s = |a: usize| to[a] as f32 / from[a] as f32;
    BBox3D::new(
        b.z1 * s(0),
        b.y1 * s(1),
        b.x1 * s(2),
        b.z2 * s(0),
        b.y2 * s(1),
        b.x2 * s(2),
    )
    .expect("scaling preserves box validity")
}

fn load_sample(
    manifest: &Manifest,
    i: usize,
    input_shape: [usize; 3],
) -> Result<TrainSample, PipelineError> {
    let vol = load_volume(manifest.image_path(i))?;
    let orig = vol.shape();
    let vol = resample_trilinear(&vol, input_shape)?;
    let vol = normalize_intensity(&vol, 0.0, 1.0)?;
    let labels = load_labels(manifest.labels_path(i))?;
    let labels = resample_labels_nearest(&labels, input_shape)?;
    let gt = scale_box(&manifest.gt_box(i), orig, input_shape);
    Ok(TrainSample {
        image: vol.data.insert_axis(Axis(0)),
        labels,
        gt,
    })
}

/// Nearest-neighbor crop of `labels` through the box mapping onto `out`:
/// output voxel centers are placed uniformly inside the box and snapped to
/// the containing label voxel (categorical data is never interpolated).
pub fn crop_labels_nearest(labels: &LabelVolume, bx: &BBox3D, out: [usize; 3]) -> Array3<u8> {
    let [d, h, w] = labels.shape();
    let lim = [d - 1, h - 1, w - 1];
    let lo = [bx.z1, bx.y1, bx.x1];
    let side = bx.size();
    Array3::from_shape_fn((out[0], out[1], out[2]), |(i, j, k)| {
        let at = |axis: usize, o: usize| {
            let c = lo[axis] + (o as f32 + 0.5) / out[axis] as f32 * side[axis];
            (c.floor().max(0.0) as usize).min(lim[axis])
        };
        labels.data[[at(0, i), at(1, j), at(2, k)]]
    })
}

/// Inverse of [`crop_labels_nearest`]: paste a crop-grid segmentation back
/// into an all-background volume; only voxels whose centers lie inside the
/// box receive labels.
pub fn paste_crop_labels(crop: &Array3<u8>, bx: &BBox3D, dims: [usize; 3]) -> LabelVolume {
    let mut out = Array3::<u8>::zeros((dims[0], dims[1], dims[2]));
    let cd = crop.dim();
    let cdims = [cd.0, cd.1, cd.2];
    let lo = [bx.z1, bx.y1, bx.x1];
    let side = bx.size();
    // voxel center v + 0.5 must lie in [lo, lo + side)
    let range = |axis: usize| {
        let a = (lo[axis] - 0.5).ceil().max(0.0) as usize;
        let b = ((lo[axis] + side[axis] - 0.5).ceil().max(0.0) as usize).min(dims[axis]);
        a.min(b)..b
    };
    let snap = |axis: usize, v: usize| {
        let u = (v as f32 + 0.5 - lo[axis]) / side[axis] * cdims[axis] as f32;
        (u.floor().max(0.0) as usize).min(cdims[axis] - 1)
    };
    for z in range(0) {
        for y in range(1) {
            for x in range(2) {
                out[[z, y, x]] = crop[[snap(0, z), snap(1, y), snap(2, x)]];
            }
        }
    }
    LabelVolume::new(out, NUM_CLASSES).expect("pasted labels stay in range")
}

fn jitter_box(b: &BBox3D, rng: &mut SplitMix64, frac: f32, dims: [usize; 3]) -> BBox3D {
    let s = b.size();
    let j = |rng: &mut SplitMix64, side: f32| rng.uniform(-frac as f64, frac as f64) as f32 * side;
    let cand = BBox3D::new(
        b.z1 + j(rng, s[0]),
        b.y1 + j(rng, s[1]),
        b.x1 + j(rng, s[2]),
        b.z2 + j(rng, s[0]),
        b.y2 + j(rng, s[1]),
        b.x2 + j(rng, s[2]),
    );
    match cand {
        Ok(c) => c.clip(dims).unwrap_or(*b),
        Err(_) => *b,
    }
}

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

pub const LOSS_CSV_HEADER: &str = "step,phase,l_box,l_cls,l_seg,l_edge,total";

#[derive(Debug)]
pub struct TrainSummary {
    pub steps: usize,
    pub step10_total: f32,
    pub final_epoch_mean_total: f32,
    pub loss_csv: PathBuf,
    pub checkpoint_dir: PathBuf,
    pub reports: Vec<LossReport>,
}

pub fn train(
    cfg: &TrainConfig,
    manifest: &Manifest,
    out_dir: &Path,
) -> Result<TrainSummary, PipelineError> {
    train_variant(cfg, manifest, Variant::Full, out_dir)
}

pub fn train_variant(
    cfg: &TrainConfig,
    manifest: &Manifest,
    variant: Variant,
    out_dir: &Path,
) -> Result<TrainSummary, PipelineError> {
    cfg.validate()?;
    let n = manifest.samples.len();
    if n < 2 {
        return Err(PipelineError::TooFewSamples(n, 2));
    }
    std::fs::create_dir_all(out_dir).map_err(|e| io_err(out_dir, e))?;

    let mut rng = SplitMix64::new(cfg.seed);
    let mut init_rng = rng.fork();
    let mut store = ParamStore::new();
    init_detector(&mut store, &mut init_rng, &cfg.detector);
    let ucfg = adapted_unet(cfg, variant);
    init_unet(&mut store, &mut init_rng, &ucfg);

    let samples: Vec<TrainSample> = (0..n)
        .map(|i| load_sample(manifest, i, cfg.input_shape))
        .collect::<Result<_, _>>()?;
    let anchors = generate_anchors(
        &cfg.detector.level_shapes(cfg.input_shape),
        &cfg.detector.strides,
        &cfg.detector.scales,
    )?;

    let csv_path = out_dir.join("loss.csv");
    let file = std::fs::File::create(&csv_path).map_err(|e| io_err(&csv_path, e))?;
    let mut csv = std::io::BufWriter::new(file);
    writeln!(csv, "{LOSS_CSV_HEADER}").map_err(|e| io_err(&csv_path, e))?;

    let total_steps = cfg.total_steps();
    let phase1 = cfg.phase1_steps();
    let teacher_until = (phase1 as f64 * TEACHER_FORCING_FRACTION).round() as usize;
    let mut reports = Vec::with_capacity(total_steps);
    for step in 1..=total_steps {
        let phase = if step <= phase1 { 1 } else { 2 };
        let sample = &samples[rng.below(n)];
        let teacher = step <= teacher_until;
        let report = train_step(
            &mut store, cfg, &ucfg, variant, sample, &anchors, &mut rng, phase, teacher,
        )?;
        if !report.total.is_finite() {
            return Err(PipelineError::Diverged { step });
        }
        writeln!(
            csv,
            "{step},{phase},{},{},{},{},{}",
            report.l_box, report.l_cls, report.l_seg, report.l_edge, report.total
        )
        .map_err(|e| io_err(&csv_path, e))?;
        reports.push(report);
    }
    csv.flush().map_err(|e| io_err(&csv_path, e))?;

    let ckpt_dir = out_dir.join("checkpoint");
    let meta = CheckpointMeta {
        config: cfg.clone(),
        variant,
    };
    save_checkpoint(&store, &meta, &ckpt_dir)?;

    let step10_total = reports[(10.min(reports.len())) - 1].total;
    let tail = reports.len().saturating_sub(cfg.steps_per_epoch);
    let final_epoch_mean_total =
        reports[tail..].iter().map(|r| r.total).sum::<f32>() / (reports.len() - tail) as f32;
    Ok(TrainSummary {
        steps: reports.len(),
        step10_total,
        final_epoch_mean_total,
        loss_csv: csv_path,
        checkpoint_dir: ckpt_dir,
        reports,
    })
}

/// Crop source tensor and the segmentation box rescaled into its grid.
fn crop_source(
    g: &mut Graph,
    store: &ParamStore,
    cfg: &TrainConfig,
    variant: Variant,
    x: Var,
    pyr: &[Var],
    seg_box: &BBox3D,
) -> (Var, BBox3D) {
    let scaled = |b: &BBox3D, s: f32| BBox3D {
        z1: b.z1 / s,
        y1: b.y1 / s,
        x1: b.x1 / s,
        z2: b.z2 / s,
        y2: b.y2 / s,
        x2: b.x2 / s,
    };
    match variant {
        Variant::InputIc => {
            // recompute the stem stage; the parameters are shared, so both
            // evaluations contribute the same gradients they would in a
            // single fused graph
            let s2 = ConvSpec {
                stride: [2, 2, 2],
                pad: [1, 1, 1],
            };
            let stem = conv(g, store, "bb.stem", x, s2, true, true);
            (stem, scaled(seg_box, 2.0))
        }
        Variant::InputIp => {
            let level = refine_level(&cfg.detector, seg_box);
            (
                pyr[level],
                scaled(seg_box, cfg.detector.strides[level] as f32),
            )
        }
        _ => (x, *seg_box),
    }
}

#[allow(clippy::too_many_arguments)]
fn train_step(
    store: &mut ParamStore,
    cfg: &TrainConfig,
    ucfg: &UnetConfig,
    variant: Variant,
    sample: &TrainSample,
    anchors: &AnchorSet,
    rng: &mut SplitMix64,
    phase: usize,
    teacher: bool,
) -> Result<LossReport, PipelineError> {
    let mut g = Graph::new();
    let x = g.input4(sample.image.clone());
    g.freeze(x); // nothing reads d loss / d image
    let pyr = backbone_fpn_forward(&mut g, store, &cfg.detector, x)?;
    let (scores, deltas) = rpn_forward(&mut g, store, &cfg.detector, &pyr);

    // RPN supervision
    let targets = assign_anchor_targets(anchors, &sample.gt, rng);
    let mut cls_idx = Vec::new();
    let mut cls_tgt = Vec::new();
    let mut box_rows = Vec::new();
    let mut box_tgt = Vec::new();
    for (i, &l) in targets.labels.iter().enumerate() {
        match l {
            1 => {
                cls_idx.push(i);
                cls_tgt.push(1.0);
                box_rows.push(i);
                box_tgt.push(
                    targets.deltas[i]
                        .expect("positive has delta")
                        .as_array()
                        .to_vec(),
                );
            }
            -1 => {
                cls_idx.push(i);
                cls_tgt.push(0.0);
            }
            _ => {}
        }
    }
    let rpn_cls = g.bce_with_logits(scores, cls_idx, cls_tgt);
    let rpn_box = g.smooth_l1(deltas, box_rows, box_tgt);

    // proposal selection (pure data flow; gradients reach the FPN only
    // through the refine head's RoI-align)
    let proposals = make_proposals(&g, scores, deltas, anchors, cfg.input_shape);
    let selected = select_heart_box(&proposals, DETECT_THRESHOLD).ok();

    let mut cls_terms = vec![rpn_cls];
    let mut box_terms = vec![rpn_box];
    let mut predicted_box = None;
    if let Some(sel) = &selected {
        if variant == Variant::NoRefine {
            predicted_box = Some(sel.proposal.bbox);
        } else {
            let (logit, delta) =
                refine_forward(&mut g, store, &cfg.detector, &pyr, &sel.proposal.bbox);
            cls_terms.push(g.bce_with_logits(logit, vec![0], vec![1.0]));
            let delta2 = g.reshape(delta, &[1, 6]);
            let dtgt = encode_box(&sel.proposal.bbox, &sample.gt)
                .as_array()
                .to_vec();
            box_terms.push(g.smooth_l1(delta2, vec![0], vec![dtgt]));
            let dv = g.value(delta);
            let bd = BoxDelta::from_array([dv[[0]], dv[[1]], dv[[2]], dv[[3]], dv[[4]], dv[[5]]]);
            predicted_box = apply_refinement(&sel.proposal.bbox, &bd, cfg.input_shape).ok();
        }
    }
    let even = |k: usize| vec![1.0 / k as f32; k];
    let l_cls = g.weighted_sum(&cls_terms, &even(cls_terms.len()));
    let l_box = g.weighted_sum(&box_terms, &even(box_terms.len()));

    // segmentation box: teacher-forced early, predicted afterwards, with a
    // fallback when the prediction is missing or collapsed
    let usable = predicted_box.filter(|b| b.size().iter().all(|&s| s >= MIN_SEG_BOX_SIDE));
    let seg_box = if teacher || usable.is_none() {
        jitter_box(&sample.gt, rng, TEACHER_JITTER, cfg.input_shape)
    } else {
        usable.unwrap()
    };

    let (src, src_box) = crop_source(&mut g, store, cfg, variant, x, &pyr.levels, &seg_box);
    let crop = g.roi_align(src, src_box, RoiAlignSpec::cube(cfg.roi_size));
    let logits = unet_forward(&mut g, store, ucfg, crop)?;
    let out = 2 * cfg.roi_size;
    let labels = crop_labels_nearest(&sample.labels, &seg_box, [out, out, out]);
    let l_seg = g.seg_cross_entropy(logits, &labels);

    let w = &cfg.weights;
    let mut parts = vec![l_box, l_cls, l_seg];
    let mut weights = vec![w.w1, w.w2, w.w3];
    let mut l_edge_val = 0.0;
    if phase == 2 && variant != Variant::NoEdge {
        let probs = g.softmax_channels(logits);
        let target = one_hot(&LabelVolume::new(labels, NUM_CLASSES).expect("cropped labels valid"));
        let l_edge = g.edge_loss(probs, &target.data, false);
        l_edge_val = g.scalar(l_edge);
        parts.push(l_edge);
        weights.push(w.w4);
    }
    let total = g.weighted_sum(&parts, &weights);

    let report = LossReport {
        l_box: g.scalar(l_box),
        l_cls: g.scalar(l_cls),
        l_seg: g.scalar(l_seg),
        l_edge: l_edge_val,
        total: g.scalar(total),
    };
    if !report.total.is_finite() {
        return Ok(report);
    }
    g.backward(total);
    let mut grads = g.param_grads();
    ParamStore::clip_global_norm(&mut grads, cfg.grad_clip);
    store.adam_step(&grads, cfg.lr);
    Ok(report)
}

// ---------------------------------------------------------------------------
// Inference
// ---------------------------------------------------------------------------

#[derive(Debug)]
pub struct InferOutput {
    /// Segmentation at the input volume's original resolution.
    pub labels: LabelVolume,
    /// Final detection (post-refinement) in working-grid coordinates.
    pub proposal: Proposal,
    pub low_confidence: bool,
    /// Wall-clock seconds for the detector -> crop -> U-net -> paste span,
    /// excluding data loading and resampling.
    pub dotted_box_seconds: f64,
}

pub fn infer(
    store: &ParamStore,
    meta: &CheckpointMeta,
    vol: &Volume,
) -> Result<InferOutput, PipelineError> {
    let cfg = &meta.config;
    let orig = vol.shape();
    let resampled = resample_trilinear(vol, cfg.input_shape)?;
    let norm = normalize_intensity(&resampled, 0.0, 1.0)?;
    let image = norm.data.insert_axis(Axis(0));
    let anchors = generate_anchors(
        &cfg.detector.level_shapes(cfg.input_shape),
        &cfg.detector.strides,
        &cfg.detector.scales,
    )?;

    let t0 = Instant::now();
    let mut g = Graph::new();
    let x = g.input4(image);
    let pyr = backbone_fpn_forward(&mut g, store, &cfg.detector, x)?;
    let (scores, deltas) = rpn_forward(&mut g, store, &cfg.detector, &pyr);
    let proposals = make_proposals(&g, scores, deltas, &anchors, cfg.input_shape);
    let sel = select_heart_box(&proposals, DETECT_THRESHOLD)?;
    let mut bx = sel.proposal.bbox;
    if meta.variant != Variant::NoRefine {
        let (_, delta) = refine_forward(&mut g, store, &cfg.detector, &pyr, &bx);
        let dv = g.value(delta);
        let bd = BoxDelta::from_array([dv[[0]], dv[[1]], dv[[2]], dv[[3]], dv[[4]], dv[[5]]]);
        // a refinement that collapses the box is discarded; the raw
        // proposal survived clipping and is always usable
        if let Ok(refined) = apply_refinement(&bx, &bd, cfg.input_shape) {
            bx = refined;
        }
    }
    let (src, src_box) = crop_source(&mut g, store, cfg, meta.variant, x, &pyr.levels, &bx);
    let crop = g.roi_align(src, src_box, RoiAlignSpec::cube(cfg.roi_size));
    let ucfg = adapted_unet(cfg, meta.variant);
    let logits = unet_forward(&mut g, store, &ucfg, crop)?;
    let probs = predict_probs(&SegMap {
        data: g.value4(logits),
        kind: SegKind::Logits,
    })?;
    let crop_labels = argmax_labels(&probs);
    let pasted = paste_crop_labels(&crop_labels.data, &bx, cfg.input_shape);
    let dotted_box_seconds = t0.elapsed().as_secs_f64();

    let labels = resample_labels_nearest(&pasted, orig)?;
    Ok(InferOutput {
        labels,
        proposal: Proposal {
            bbox: bx,
            score: sel.proposal.score,
        },
        low_confidence: sel.low_confidence,
        dotted_box_seconds,
    })
}

// ---------------------------------------------------------------------------
// Metrics
// ---------------------------------------------------------------------------

/// 2|A n B| / (|A| + |B|) for one class; 1 when both masks are empty.
pub fn dice(pred: &LabelVolume, gt: &LabelVolume, cls: u8) -> Result<f32, PipelineError> {
    if pred.shape() != gt.shape() {
        return Err(PipelineError::ShapeMismatch(pred.shape(), gt.shape()));
    }
    let mut inter = 0usize;
    let mut a = 0usize;
    let mut b = 0usize;
    for (&p, &g) in pred.data.iter().zip(gt.data.iter()) {
        let pa = p == cls;
        let gb = g == cls;
        a += pa as usize;
        b += gb as usize;
        inter += (pa && gb) as usize;
    }
    if a + b == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter as f32 / (a + b) as f32)
}

/// Per-class Dice in Table-1 order plus detection IoU and timing.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricsReport {
    pub per_class: [f32; NUM_STRUCTURES],
    pub mean_dice: f32,
    pub mean_iou: f32,
    pub mean_seconds: f64,
    pub per_sample_iou: Vec<f32>,
}

impl MetricsReport {
    pub fn csv(&self) -> String {
        let mut header: Vec<String> = CLASS_NAMES.iter().map(|s| s.to_string()).collect();
        header.extend(["Average".into(), "IoU".into(), "Seconds".into()]);
        let mut row: Vec<String> = self.per_class.iter().map(|v| format!("{v:.4}")).collect();
        row.push(format!("{:.4}", self.mean_dice));
        row.push(format!("{:.4}", self.mean_iou));
        row.push(format!("{:.3}", self.mean_seconds));
        format!("{}\n{}\n", header.join(","), row.join(","))
    }

    pub fn table(&self) -> String {
        let mut out = String::new();
        for name in CLASS_NAMES {
            out.push_str(&format!("{name:>8}"));
        }
        out.push_str(&format!("{:>8}\n", "Average"));
        for v in self.per_class {
            out.push_str(&format!("{v:>8.3}"));
        }
        out.push_str(&format!("{:>8.3}\n", self.mean_dice));
        out
    }
}

pub fn evaluate(
    store: &ParamStore,
    meta: &CheckpointMeta,
    manifest: &Manifest,
) -> Result<MetricsReport, PipelineError> {
    let n = manifest.samples.len();
    if n == 0 {
        return Err(PipelineError::TooFewSamples(0, 1));
    }
    let mut per_class = [0.0f32; NUM_STRUCTURES];
    let mut per_sample_iou = Vec::with_capacity(n);
    let mut seconds = 0.0f64;
    for i in 0..n {
        let vol = load_volume(manifest.image_path(i))?;
        let gt = load_labels(manifest.labels_path(i))?;
        let out = infer(store, meta, &vol)?;
        for (c, slot) in per_class.iter_mut().enumerate() {
            *slot += dice(&out.labels, &gt, (c + 1) as u8)?;
        }
        let gt_box = scale_box(&manifest.gt_box(i), vol.shape(), meta.config.input_shape);
        per_sample_iou.push(iou_3d(&out.proposal.bbox, &gt_box));
        seconds += out.dotted_box_seconds;
    }
    for slot in per_class.iter_mut() {
        *slot /= n as f32;
    }
    let mean_dice = per_class.iter().sum::<f32>() / NUM_STRUCTURES as f32;
    let mean_iou = per_sample_iou.iter().sum::<f32>() / n as f32;
    Ok(MetricsReport {
        per_class,
        mean_dice,
        mean_iou,
        mean_seconds: seconds / n as f64,
        per_sample_iou,
    })
}

/// Trains the given variant at the shared step budget, then evaluates it.
pub fn ablate(
    variant: Variant,
    cfg: &TrainConfig,
    train_manifest: &Manifest,
    eval_manifest: &Manifest,
    out_dir: &Path,
) -> Result<(TrainSummary, MetricsReport), PipelineError> {
    let summary = train_variant(cfg, train_manifest, variant, out_dir)?;
    let (store, meta) = load_checkpoint(&summary.checkpoint_dir)?;
    let report = evaluate(&store, &meta, eval_manifest)?;
    Ok((summary, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::phantom::{make_dataset, PhantomSpec};

    fn tiny_cfg(seed: u64) -> TrainConfig {
        // smallest shapes the stack accepts, for smoke-level step counts
        let mut cfg = TrainConfig::desk();
        cfg.input_shape = [32, 32, 32];
        cfg.roi_size = 16;
        cfg.detector.scales = vec![10.0, 16.0];
        cfg.steps_per_epoch = 2;
        cfg.base_epochs = 2;
        cfg.edge_epochs = 1;
        cfg.seed = seed;
        cfg
    }

    fn tiny_dataset(dir: &Path, count: usize, seed: u64) -> Manifest {
        let spec = PhantomSpec::with_shape([32, 32, 32]);
        let path = make_dataset(&spec, count, seed, dir).unwrap();
        crate::phantom::load_manifest(path).unwrap()
    }

    #[test]
    fn dice_trivial_cases() {
        let a = LabelVolume::new(Array3::from_elem((4, 4, 4), 1u8), 8).unwrap();
        let b = LabelVolume::new(Array3::zeros((4, 4, 4)), 8).unwrap();
        assert_eq!(dice(&a, &a, 1).unwrap(), 1.0);
        // disjoint equal-size sets
        assert_eq!(dice(&a, &b, 1).unwrap(), 0.0);
        // both empty
        assert_eq!(dice(&b, &b, 3).unwrap(), 1.0);
        // half cover: pred labels half of gt's class-1 region and nothing else
        let mut half = Array3::<u8>::zeros((4, 4, 4));
        for z in 0..2 {
            for y in 0..4 {
                for x in 0..4 {
                    half[[z, y, x]] = 1;
                }
            }
        }
        let half = LabelVolume::new(half, 8).unwrap();
        let d = dice(&half, &a, 1).unwrap();
        assert!((d - 2.0 / 3.0).abs() < 1e-6);
        // symmetry
        assert_eq!(dice(&half, &a, 1).unwrap(), dice(&a, &half, 1).unwrap());
        // shape mismatch
        let c = LabelVolume::new(Array3::zeros((2, 4, 4)), 8).unwrap();
        assert!(matches!(
            dice(&a, &c, 1),
            Err(PipelineError::ShapeMismatch(..))
        ));
    }

    #[test]
    fn crop_paste_roundtrip_outside_is_background() {
        let mut lab = Array3::<u8>::zeros((16, 16, 16));
        for z in 4..12 {
            for y in 4..12 {
                for x in 4..12 {
                    lab[[z, y, x]] = 2;
                }
            }
        }
        let labels = LabelVolume::new(lab, 8).unwrap();
        let bx = BBox3D::new(4.0, 4.0, 4.0, 12.0, 12.0, 12.0).unwrap();
        let crop = crop_labels_nearest(&labels, &bx, [16, 16, 16]);
        assert!(crop.iter().all(|&v| v == 2));
        let pasted = paste_crop_labels(&crop, &bx, [16, 16, 16]);
        for ((z, y, x), &v) in pasted.data.indexed_iter() {
            let inside = (4..12).contains(&z) && (4..12).contains(&y) && (4..12).contains(&x);
            assert_eq!(v, if inside { 2 } else { 0 }, "at {z},{y},{x}");
        }
    }

    #[test]
    fn integer_box_crop_matches_direct_crop() {
        let mut rng = SplitMix64::new(3);
        let mut lab = Array3::<u8>::zeros((12, 12, 12));
        lab.mapv_inplace(|_| rng.below(8) as u8);
        let labels = LabelVolume::new(lab.clone(), 8).unwrap();
        // box of size 4 sampled at 4^3: exactly the voxel crop
        let bx = BBox3D::new(2.0, 3.0, 1.0, 6.0, 7.0, 5.0).unwrap();
        let crop = crop_labels_nearest(&labels, &bx, [4, 4, 4]);
        for z in 0..4 {
            for y in 0..4 {
                for x in 0..4 {
                    assert_eq!(crop[[z, y, x]], lab[[z + 2, y + 3, x + 1]]);
                }
            }
        }
    }

    #[test]
    fn variant_parsing_round_trips() {
        for name in VARIANT_NAMES {
            let v: Variant = name.parse().unwrap();
            assert_eq!(v.name(), name);
        }
        assert!(matches!(
            "io".parse::<Variant>(),
            Err(PipelineError::UnknownVariant(_))
        ));
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::desk().validate().is_ok());
        assert!(TrainConfig::paper().validate().is_ok());
        let mut bad = TrainConfig::desk();
        bad.input_shape = [40, 64, 64];
        assert!(bad.validate().is_err());
        let mut bad = TrainConfig::desk();
        bad.roi_size = 12;
        assert!(bad.validate().is_err());
        assert_eq!(TrainConfig::paper().total_steps(), 12800);
        assert_eq!(TrainConfig::desk().total_steps(), 3072);
    }

    #[test]
    fn smoke_train_is_deterministic_and_logs_phases() {
        let tmp = tempfile::tempdir().unwrap();
        let manifest = tiny_dataset(&tmp.path().join("data"), 2, 11);
        let cfg = tiny_cfg(5);
        let s1 = train_variant(&cfg, &manifest, Variant::Full, &tmp.path().join("r1")).unwrap();
        let s2 = train_variant(&cfg, &manifest, Variant::Full, &tmp.path().join("r2")).unwrap();
        let c1 = std::fs::read_to_string(&s1.loss_csv).unwrap();
        let c2 = std::fs::read_to_string(&s2.loss_csv).unwrap();
        assert_eq!(c1, c2, "identical seeds must produce identical loss logs");
        assert_eq!(s1.steps, cfg.total_steps());
        // phase-1 rows have l_edge = 0 by construction; phase 2 is logged as 2
        for (i, line) in c1.lines().skip(1).enumerate() {
            let cols: Vec<&str> = line.split(',').collect();
            assert_eq!(cols.len(), 7);
            let phase: usize = cols[1].parse().unwrap();
            if i < cfg.phase1_steps() {
                assert_eq!(phase, 1);
                assert_eq!(cols[5].parse::<f32>().unwrap(), 0.0);
            } else {
                assert_eq!(phase, 2);
            }
        }
    }

    #[test]
    fn smoke_infer_contract() {
        let tmp = tempfile::tempdir().unwrap();
        let manifest = tiny_dataset(&tmp.path().join("data"), 2, 21);
        let cfg = tiny_cfg(7);
        let summary = train(&cfg, &manifest, &tmp.path().join("run")).unwrap();
        let (store, meta) = load_checkpoint(&summary.checkpoint_dir).unwrap();
        let vol = load_volume(manifest.image_path(0)).unwrap();
        let out1 = infer(&store, &meta, &vol).unwrap();
        let out2 = infer(&store, &meta, &vol).unwrap();
        assert_eq!(
            out1.labels.data, out2.labels.data,
            "inference must be deterministic"
        );
        assert!(out1.dotted_box_seconds > 0.0);
        // labels stay in range and outside-box voxels are background
        let bx = out1.proposal.bbox;
        for ((z, y, x), &v) in out1.labels.data.indexed_iter() {
            assert!(v < NUM_CLASSES as u8);
            let zc = z as f32 + 0.5;
            let yc = y as f32 + 0.5;
            let xc = x as f32 + 0.5;
            let inside =
                zc >= bx.z1 && zc < bx.z2 && yc >= bx.y1 && yc < bx.y2 && xc >= bx.x1 && xc < bx.x2;
            if !inside {
                assert_eq!(v, 0, "foreground outside the selected box at {z},{y},{x}");
            }
        }
        // evaluation runs and reports sane ranges
        let report = evaluate(&store, &meta, &manifest).unwrap();
        for v in report.per_class {
            assert!((0.0..=1.0).contains(&v));
        }
        assert!(report.csv().starts_with("LV,Myo,RV,LA,RA,AA,PA,Average"));
    }

    #[test]
    fn evaluate_gt_against_itself_is_perfect() {
        // bypass the network: dice of gt labels against themselves
        let tmp = tempfile::tempdir().unwrap();
        let manifest = tiny_dataset(&tmp.path().join("data"), 1, 31);
        let gt = load_labels(manifest.labels_path(0)).unwrap();
        for c in 0..NUM_CLASSES as u8 {
            assert_eq!(dice(&gt, &gt, c).unwrap(), 1.0);
        }
        let b = manifest.gt_box(0);
        assert!((iou_3d(&b, &b) - 1.0).abs() < 1e-6);
    }

    #[test]
    fn variant_crop_sources_change_unet_width() {
        let cfg = TrainConfig::desk();
        assert_eq!(unet_in_channels(&cfg, Variant::Full), 1);
        assert_eq!(unet_in_channels(&cfg, Variant::InputIo), 1);
        assert_eq!(
            unet_in_channels(&cfg, Variant::InputIc),
            cfg.detector.stem_channels
        );
        assert_eq!(
            unet_in_channels(&cfg, Variant::InputIp),
            cfg.detector.fpn_channels
        );
    }

    #[test]
    fn smoke_variant_training_runs() {
        let tmp = tempfile::tempdir().unwrap();
        let manifest = tiny_dataset(&tmp.path().join("data"), 2, 41);
        for (i, variant) in [
            Variant::NoEdge,
            Variant::NoRefine,
            Variant::InputIc,
            Variant::InputIp,
        ]
        .into_iter()
        .enumerate()
        {
            let mut cfg = tiny_cfg(50 + i as u64);
            // one epoch per phase keeps this a smoke test
            cfg.base_epochs = 1;
            cfg.edge_epochs = 1;
            let out = tmp.path().join(variant.name());
            let summary = train_variant(&cfg, &manifest, variant, &out).unwrap();
            assert_eq!(summary.steps, cfg.total_steps());
            if variant == Variant::NoEdge {
                assert!(summary.reports.iter().all(|r| r.l_edge == 0.0));
            }
            let (store, meta) = load_checkpoint(&summary.checkpoint_dir).unwrap();
            assert_eq!(meta.variant, variant);
            let vol = load_volume(manifest.image_path(0)).unwrap();
            infer(&store, &meta, &vol).unwrap();
        }
    }
}
