//! Axis-aligned 3D boxes in voxel coordinates, IoU, the center-offset /
//! log-size delta parameterization, and greedy 3D NMS.
//!
//! Boxes are half-open: a box covers continuous coordinates
//! [z1, z2) x [y1, y2) x [x1, x2), all sides strictly positive.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum BoxError {
    #[error("degenerate box: sides must be positive, got {0:?}")]
    Degenerate([f32; 6]),
    #[error("non-finite box coordinate in {0:?}")]
    NonFinite([f32; 6]),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BBox3D {
    pub z1: f32,
    pub y1: f32,
    pub x1: f32,
    pub z2: f32,
    pub y2: f32,
    pub x2: f32,
}

impl BBox3D {
    pub fn new(z1: f32, y1: f32, x1: f32, z2: f32, y2: f32, x2: f32) -> Result<Self, BoxError> {
        let c = [z1, y1, x1, z2, y2, x2];
        if c.iter().any(|v| !v.is_finite()) {
            return Err(BoxError::NonFinite(c));
        }
        if !(z1 < z2 && y1 < y2 && x1 < x2) {
            return Err(BoxError::Degenerate(c));
        }
        Ok(Self {
            z1,
            y1,
            x1,
            z2,
            y2,
            x2,
        })
    }

    /// Cube of edge `scale` centered at (cz, cy, cx).
    pub fn cube(center: [f32; 3], scale: f32) -> Self {
        let h = scale / 2.0;
        Self {
            z1: center[0] - h,
            y1: center[1] - h,
            x1: center[2] - h,
            z2: center[0] + h,
            y2: center[1] + h,
            x2: center[2] + h,
        }
    }

    pub fn center(&self) -> [f32; 3] {
        [
            (self.z1 + self.z2) / 2.0,
            (self.y1 + self.y2) / 2.0,
            (self.x1 + self.x2) / 2.0,
        ]
    }

    pub fn size(&self) -> [f32; 3] {
        [self.z2 - self.z1, self.y2 - self.y1, self.x2 - self.x1]
    }

    pub fn volume(&self) -> f32 {
        let s = self.size();
        s[0] * s[1] * s[2]
    }

    /// Clip to a volume of shape (D, H, W). Returns None when the clipped
    /// box degenerates (any side < 1 voxel).
    pub fn clip(&self, shape: [usize; 3]) -> Option<BBox3D> {
        let z1 = self.z1.max(0.0);
        let y1 = self.y1.max(0.0);
        let x1 = self.x1.max(0.0);
        let z2 = self.z2.min(shape[0] as f32);
        let y2 = self.y2.min(shape[1] as f32);
        let x2 = self.x2.min(shape[2] as f32);
        if z2 - z1 < 1.0 || y2 - y1 < 1.0 || x2 - x1 < 1.0 {
            return None;
        }
        Some(BBox3D {
            z1,
            y1,
            x1,
            z2,
            y2,
            x2,
        })
    }

    pub fn as_array(&self) -> [f32; 6] {
        [self.z1, self.y1, self.x1, self.z2, self.y2, self.x2]
    }
}

/// Intersection volume over union volume, in [0, 1].
pub fn iou_3d(a: &BBox3D, b: &BBox3D) -> f32 {
    let iz = (a.z2.min(b.z2) - a.z1.max(b.z1)).max(0.0);
    let iy = (a.y2.min(b.y2) - a.y1.max(b.y1)).max(0.0);
    let ix = (a.x2.min(b.x2) - a.x1.max(b.x1)).max(0.0);
    let inter = iz * iy * ix;
    let union = a.volume() + b.volume() - inter;
    inter / union
}

/// Center offsets normalized by anchor size plus log-scale size ratios,
/// the Faster R-CNN parameterization extended to three axes.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct BoxDelta {
    pub dz: f32,
    pub dy: f32,
    pub dx: f32,
    pub dd: f32,
    pub dh: f32,
    pub dw: f32,
}

impl BoxDelta {
    pub fn as_array(&self) -> [f32; 6] {
        [self.dz, self.dy, self.dx, self.dd, self.dh, self.dw]
    }

    pub fn from_array(a: [f32; 6]) -> Self {
        Self {
            dz: a[0],
            dy: a[1],
            dx: a[2],
            dd: a[3],
            dh: a[4],
            dw: a[5],
        }
    }
}

pub fn encode_box(anchor: &BBox3D, gt: &BBox3D) -> BoxDelta {
    let ac = anchor.center();
    let asz = anchor.size();
    let gc = gt.center();
    let gs = gt.size();
    BoxDelta {
        dz: (gc[0] - ac[0]) / asz[0],
        dy: (gc[1] - ac[1]) / asz[1],
        dx: (gc[2] - ac[2]) / asz[2],
        dd: (gs[0] / asz[0]).ln(),
        dh: (gs[1] / asz[1]).ln(),
        dw: (gs[2] / asz[2]).ln(),
    }
}

pub fn decode_box(anchor: &BBox3D, delta: &BoxDelta) -> BBox3D {
    let ac = anchor.center();
    let asz = anchor.size();
    let cz = ac[0] + delta.dz * asz[0];
    let cy = ac[1] + delta.dy * asz[1];
    let cx = ac[2] + delta.dx * asz[2];
    let sd = asz[0] * delta.dd.exp();
    let sh = asz[1] * delta.dh.exp();
    let sw = asz[2] * delta.dw.exp();
    BBox3D {
        z1: cz - sd / 2.0,
        y1: cy - sh / 2.0,
        x1: cx - sw / 2.0,
        z2: cz + sd / 2.0,
        y2: cy + sh / 2.0,
        x2: cx + sw / 2.0,
    }
}

#[derive(Clone, Copy, Debug)]
pub struct Proposal {
    pub bbox: BBox3D,
    pub score: f32,
}

/// Greedy descending-score suppression. Ties broken by lower original index
/// (the sort is stable on the pre-sorted index list).
pub fn nms_3d(proposals: &[Proposal], iou_thresh: f32) -> Vec<Proposal> {
    assert!(iou_thresh > 0.0 && iou_thresh < 1.0);
    let mut order: Vec<usize> = (0..proposals.len()).collect();
    order.sort_by(|&a, &b| proposals[b].score.partial_cmp(&proposals[a].score).unwrap());
    let mut kept: Vec<Proposal> = Vec::new();
    for &i in &order {
        let p = &proposals[i];
        if kept.iter().all(|k| iou_3d(&k.bbox, &p.bbox) <= iou_thresh) {
            kept.push(*p);
        }
    }
    kept
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SplitMix64;
    use proptest::prelude::*;

    fn unit_cube_at(z: f32, y: f32, x: f32) -> BBox3D {
        BBox3D::new(z, y, x, z + 1.0, y + 1.0, x + 1.0).unwrap()
    }

    #[test]
    fn iou_self_is_one() {
        let b = BBox3D::new(1.0, 2.0, 3.0, 4.0, 6.0, 9.0).unwrap();
        assert!((iou_3d(&b, &b) - 1.0).abs() < 1e-6);
    }

    #[test]
    fn iou_disjoint_is_zero() {
        let a = unit_cube_at(0.0, 0.0, 0.0);
        let b = unit_cube_at(5.0, 5.0, 5.0);
        assert_eq!(iou_3d(&a, &b), 0.0);
    }

    #[test]
    fn iou_half_offset_unit_cubes() {
        // Offset 0.5 along z: intersection 0.5, union 1.5.
        let a = unit_cube_at(0.0, 0.0, 0.0);
        let b = unit_cube_at(0.5, 0.0, 0.0);
        assert!((iou_3d(&a, &b) - 1.0 / 3.0).abs() < 1e-6);
    }

    #[test]
    fn encode_identity_is_zero_delta() {
        let a = BBox3D::cube([32.0, 32.0, 32.0], 64.0);
        let d = encode_box(&a, &a);
        for v in d.as_array() {
            assert!(v.abs() < 1e-6);
        }
    }

    #[test]
    fn encode_double_size_same_center() {
        let a = BBox3D::cube([32.0, 32.0, 32.0], 64.0);
        let gt = BBox3D::cube([32.0, 32.0, 32.0], 128.0);
        let d = encode_box(&a, &gt);
        assert!(d.dz.abs() < 1e-6 && d.dy.abs() < 1e-6 && d.dx.abs() < 1e-6);
        let ln2 = std::f32::consts::LN_2;
        assert!((d.dd - ln2).abs() < 1e-6);
        assert!((d.dh - ln2).abs() < 1e-6);
        assert!((d.dw - ln2).abs() < 1e-6);
    }

    #[test]
    fn clip_degenerate_returns_none() {
        let b = BBox3D::new(-5.0, -5.0, -5.0, 0.5, 2.0, 2.0).unwrap();
        assert!(b.clip([10, 10, 10]).is_none());
    }

    #[test]
    fn nms_single_proposal_unchanged() {
        let p = Proposal {
            bbox: unit_cube_at(0.0, 0.0, 0.0),
            score: 0.4,
        };
        let kept = nms_3d(&[p], 0.5);
        assert_eq!(kept.len(), 1);
        assert_eq!(kept[0].score, 0.4);
    }

    #[test]
    fn nms_suppresses_duplicate() {
        let b = unit_cube_at(0.0, 0.0, 0.0);
        let kept = nms_3d(
            &[
                Proposal {
                    bbox: b,
                    score: 0.8,
                },
                Proposal {
                    bbox: b,
                    score: 0.9,
                },
            ],
            0.5,
        );
        assert_eq!(kept.len(), 1);
        assert_eq!(kept[0].score, 0.9);
    }

    /// O(n^2) reference with explicit suppressed-set bookkeeping.
    fn nms_reference(proposals: &[Proposal], iou_thresh: f32) -> Vec<Proposal> {
        let mut alive: Vec<bool> = vec![true; proposals.len()];
        let mut kept = Vec::new();
        loop {
            let mut best: Option<usize> = None;
            for i in 0..proposals.len() {
                if alive[i] && best.map_or(true, |b| proposals[i].score > proposals[b].score) {
                    best = Some(i);
                }
            }
            let Some(b) = best else { break };
            alive[b] = false;
            kept.push(proposals[b]);
            for i in 0..proposals.len() {
                if alive[i] && iou_3d(&proposals[b].bbox, &proposals[i].bbox) > iou_thresh {
                    alive[i] = false;
                }
            }
        }
        kept
    }

    fn random_proposals(rng: &mut SplitMix64, n: usize) -> Vec<Proposal> {
        (0..n)
            .map(|_| {
                let z = rng.uniform(0.0, 20.0) as f32;
                let y = rng.uniform(0.0, 20.0) as f32;
                let x = rng.uniform(0.0, 20.0) as f32;
                let s = rng.uniform(1.0, 10.0) as f32;
                Proposal {
                    bbox: BBox3D::new(z, y, x, z + s, y + s, x + s).unwrap(),
                    score: rng.next_f32(),
                }
            })
            .collect()
    }

    #[test]
    fn nms_matches_brute_force_on_random_sets() {
        let mut rng = SplitMix64::new(11);
        for _ in 0..30 {
            let props = random_proposals(&mut rng, 50);
            let fast = nms_3d(&props, 0.3);
            let slow = nms_reference(&props, 0.3);
            assert_eq!(fast.len(), slow.len());
            for (a, b) in fast.iter().zip(&slow) {
                assert_eq!(a.bbox, b.bbox);
                assert_eq!(a.score, b.score);
            }
        }
    }

    proptest! {
        #[test]
        fn decode_inverts_encode(seed in 0u64..2000) {
            let mut rng = SplitMix64::new(seed);
            let rand_box = |rng: &mut SplitMix64| {
                let z = rng.uniform(0.0, 50.0) as f32;
                let y = rng.uniform(0.0, 50.0) as f32;
                let x = rng.uniform(0.0, 50.0) as f32;
                let sd = rng.uniform(2.0, 40.0) as f32;
                let sh = rng.uniform(2.0, 40.0) as f32;
                let sw = rng.uniform(2.0, 40.0) as f32;
                BBox3D::new(z, y, x, z + sd, y + sh, x + sw).unwrap()
            };
            let anchor = rand_box(&mut rng);
            let gt = rand_box(&mut rng);
            let back = decode_box(&anchor, &encode_box(&anchor, &gt));
            for (a, b) in back.as_array().iter().zip(gt.as_array()) {
                prop_assert!((a - b).abs() < 1e-3 * b.abs().max(1.0));
            }
        }

        #[test]
        fn iou_symmetric_and_bounded(seed in 0u64..2000) {
            let mut rng = SplitMix64::new(seed);
            let ps = random_proposals(&mut rng, 2);
            let (a, b) = (&ps[0].bbox, &ps[1].bbox);
            let ab = iou_3d(a, b);
            prop_assert!((ab - iou_3d(b, a)).abs() < 1e-7);
            prop_assert!((0.0..=1.0).contains(&ab));
        }
    }
}
