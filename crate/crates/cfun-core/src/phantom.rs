//! Deterministic synthetic heart phantoms: paired (Volume, LabelVolume,
//! ground-truth box) samples with 7 foreground structures.
//!
//! Geometry is ellipsoids and tubes, not anatomy: two central "ventricles",
//! a myocardium shell around the first, two "atria" above, two "vessel"
//! tubes exiting upward, plus optional bright clutter outside the heart box.
//! Everything is driven by the SplitMix64 stream in [`crate::rng`], so a
//! (spec, seed) pair regenerates bit-identical files.

use crate::boxes::BBox3D;
use crate::rng::SplitMix64;
use crate::volume::{save_labels, save_volume, LabelVolume, Volume, VolumeError};
use ndarray::Array3;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};
use thiserror::Error;

pub const NUM_STRUCTURES: usize = 7;
pub const NUM_CLASSES: usize = NUM_STRUCTURES + 1;

/// Class names in report order (Table-style: LV Myo RV LA RA AA PA).
pub const CLASS_NAMES: [&str; NUM_STRUCTURES] = ["LV", "Myo", "RV", "LA", "RA", "AA", "PA"];

const BACKGROUND_MEAN: f32 = 0.15;
const CLUTTER_MEAN: f32 = 0.9;
/// Distinct mean intensity per foreground label 1..=7.
const STRUCTURE_MEANS: [f32; NUM_STRUCTURES] = [0.85, 0.45, 0.78, 0.7, 0.62, 0.92, 0.55];

#[derive(Debug, Error)]
pub enum PhantomError {
    #[error("invalid phantom spec: {0}")]
    InvalidSpec(String),
    #[error("heart at maximum jitter does not fit inside volume {shape:?}")]
    HeartDoesNotFit { shape: [usize; 3] },
    #[error("labels contain no foreground voxel")]
    AllBackground,
    #[error(transparent)]
    Volume(#[from] VolumeError),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("bad manifest {path}: {source}")]
    BadManifest {
        path: String,
        #[source]
        source: serde_json::Error,
    },
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PhantomSpec {
    pub shape: [usize; 3],
    pub num_structures: usize,
    pub noise_sigma: f32,
    pub heart_scale_range: (f32, f32),
    pub clutter_count: usize,
}

impl PhantomSpec {
    pub fn with_shape(shape: [usize; 3]) -> Self {
        Self {
            shape,
            num_structures: NUM_STRUCTURES,
            noise_sigma: 0.02,
            heart_scale_range: (0.38, 0.52),
            clutter_count: 3,
        }
    }

    pub fn validate(&self) -> Result<(), PhantomError> {
        let (lo, hi) = self.heart_scale_range;
        if !(0.0 < lo && lo <= hi && hi <= 1.0) {
            return Err(PhantomError::InvalidSpec(format!(
                "heart_scale_range must satisfy 0 < lo <= hi <= 1, got ({lo}, {hi})"
            )));
        }
        if self.shape.iter().any(|&d| d < 16) {
            return Err(PhantomError::InvalidSpec(format!(
                "shape dims must be >= 16, got {:?}",
                self.shape
            )));
        }
        if self.num_structures != NUM_STRUCTURES {
            return Err(PhantomError::InvalidSpec(format!(
                "num_structures is fixed at {NUM_STRUCTURES}"
            )));
        }
        if !(self.noise_sigma >= 0.0) {
            return Err(PhantomError::InvalidSpec("noise_sigma must be >= 0".into()));
        }
        Ok(())
    }
}

/// One structure in the normalized heart frame: coordinates are fractions
/// of the heart half-extent, so every shape fits inside the unit ball.
enum Shape {
    Ellipsoid {
        center: [f32; 3],
        radii: [f32; 3],
    },
    /// Shell between `outer` radii and the inner ellipsoid of `inner` radii,
    /// both centered at `center`.
    Shell {
        center: [f32; 3],
        outer: [f32; 3],
        inner: [f32; 3],
    },
    /// Capsule: segment p0..p1 with radius.
    Tube {
        p0: [f32; 3],
        p1: [f32; 3],
        radius: f32,
    },
}

impl Shape {
    fn contains(&self, u: [f32; 3]) -> bool {
        match self {
            Shape::Ellipsoid { center, radii } => ellipsoid_dist2(u, center, radii) <= 1.0,
            Shape::Shell {
                center,
                outer,
                inner,
            } => {
                ellipsoid_dist2(u, center, outer) <= 1.0 && ellipsoid_dist2(u, center, inner) > 1.0
            }
            Shape::Tube { p0, p1, radius } => {
                let d = [p1[0] - p0[0], p1[1] - p0[1], p1[2] - p0[2]];
                let v = [u[0] - p0[0], u[1] - p0[1], u[2] - p0[2]];
                let len2 = d[0] * d[0] + d[1] * d[1] + d[2] * d[2];
                let t = ((v[0] * d[0] + v[1] * d[1] + v[2] * d[2]) / len2).clamp(0.0, 1.0);
                let c = [v[0] - t * d[0], v[1] - t * d[1], v[2] - t * d[2]];
                c[0] * c[0] + c[1] * c[1] + c[2] * c[2] <= radius * radius
            }
        }
    }
}

fn ellipsoid_dist2(u: [f32; 3], c: &[f32; 3], r: &[f32; 3]) -> f32 {
    let dz = (u[0] - c[0]) / r[0];
    let dy = (u[1] - c[1]) / r[1];
    let dx = (u[2] - c[2]) / r[2];
    dz * dz + dy * dy + dx * dx
}

fn jitter3(rng: &mut SplitMix64, amount: f32) -> [f32; 3] {
    [
        rng.uniform(-amount as f64, amount as f64) as f32,
        rng.uniform(-amount as f64, amount as f64) as f32,
        rng.uniform(-amount as f64, amount as f64) as f32,
    ]
}

fn add3(a: [f32; 3], b: [f32; 3]) -> [f32; 3] {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

fn scale3(a: [f32; 3], s: f32) -> [f32; 3] {
    [a[0] * s, a[1] * s, a[2] * s]
}

/// Build the 7 structures with small per-structure placement/size jitter.
/// Draw order is fixed: LV, Myo shell, RV, LA, RA, AA, PA; when structures
/// overlap, the later-drawn one owns the voxel. The Myo shell is drawn
/// right after LV so it stays a proper shell around it.
fn build_structures(rng: &mut SplitMix64) -> Vec<Shape> {
    let lv_c = add3([-0.28, 0.08, -0.26], jitter3(rng, 0.04));
    let lv_r = scale3([0.4, 0.36, 0.32], rng.uniform(0.92, 1.08) as f32);
    let rv_c = add3([-0.28, -0.02, 0.34], jitter3(rng, 0.04));
    let rv_r = scale3([0.38, 0.32, 0.28], rng.uniform(0.92, 1.08) as f32);
    let la_c = add3([0.38, 0.14, -0.3], jitter3(rng, 0.04));
    let la_r = scale3([0.26, 0.25, 0.25], rng.uniform(0.92, 1.08) as f32);
    let ra_c = add3([0.38, -0.04, 0.32], jitter3(rng, 0.04));
    let ra_r = scale3([0.26, 0.25, 0.25], rng.uniform(0.92, 1.08) as f32);
    let aa_x = add3([0.0, -0.1, 0.02], jitter3(rng, 0.03));
    let aa_rad = 0.14 * rng.uniform(0.92, 1.08) as f32;
    let pa_x = add3([0.0, -0.28, 0.3], jitter3(rng, 0.03));
    let pa_rad = 0.12 * rng.uniform(0.92, 1.08) as f32;
    vec![
        Shape::Ellipsoid {
            center: lv_c,
            radii: lv_r,
        },
        Shape::Shell {
            center: lv_c,
            outer: scale3(lv_r, 1.32),
            inner: lv_r,
        },
        Shape::Ellipsoid {
            center: rv_c,
            radii: rv_r,
        },
        Shape::Ellipsoid {
            center: la_c,
            radii: la_r,
        },
        Shape::Ellipsoid {
            center: ra_c,
            radii: ra_r,
        },
        Shape::Tube {
            p0: [0.05, aa_x[1], aa_x[2]],
            p1: [0.92, aa_x[1] + 0.05, aa_x[2]],
            radius: aa_rad,
        },
        Shape::Tube {
            p0: [0.0, pa_x[1], pa_x[2]],
            p1: [0.88, pa_x[1] - 0.06, pa_x[2] + 0.1],
            radius: pa_rad,
        },
    ]
}

/// Draw order for label ownership: index i produces label i+1. LV comes
/// first and the Myo shell second, so at their shared boundary the shell
/// wins, which keeps Myo a closed surface around LV.
const DRAW_ORDER: [usize; NUM_STRUCTURES] = [0, 1, 2, 3, 4, 5, 6];

pub fn generate_phantom(
    spec: &PhantomSpec,
    seed: u64,
) -> Result<(Volume, LabelVolume, BBox3D), PhantomError> {
    spec.validate()?;
    let mut rng = SplitMix64::new(seed);
    let [d, h, w] = spec.shape;
    let extent = [d as f32, h as f32, w as f32];

    // Heart placement: jittered center, jittered per-axis half extent.
    let (lo, hi) = spec.heart_scale_range;
    let scale = rng.uniform(lo as f64, hi as f64) as f32;
    let center_jitter = jitter3(&mut rng, 0.05);
    let center = [
        extent[0] * (0.5 + center_jitter[0]),
        extent[1] * (0.5 + center_jitter[1]),
        extent[2] * (0.5 + center_jitter[2]),
    ];
    let half = [
        extent[0] * scale / 2.0,
        extent[1] * scale / 2.0,
        extent[2] * scale / 2.0,
    ];
    // Worst case: maximum scale and maximum jitter must still fit.
    for a in 0..3 {
        let worst_half = extent[a] * hi / 2.0;
        let worst_center = extent[a] * (0.5 + 0.05);
        if worst_center + worst_half > extent[a] || extent[a] * 0.45 - worst_half < 0.0 {
            return Err(PhantomError::HeartDoesNotFit { shape: spec.shape });
        }
    }

    let structures = build_structures(&mut rng);

    let mut labels = Array3::<u8>::zeros((d, h, w));
    let mut image = Array3::<f32>::from_elem((d, h, w), BACKGROUND_MEAN);

    // Rasterize only inside the heart's bounding region.
    let lo_i = |a: usize| ((center[a] - half[a]).floor().max(0.0)) as usize;
    let hi_i = |a: usize| ((center[a] + half[a]).ceil() as usize).min(spec.shape[a]);
    for z in lo_i(0)..hi_i(0) {
        for y in lo_i(1)..hi_i(1) {
            for x in lo_i(2)..hi_i(2) {
                let u = [
                    (z as f32 + 0.5 - center[0]) / half[0],
                    (y as f32 + 0.5 - center[1]) / half[1],
                    (x as f32 + 0.5 - center[2]) / half[2],
                ];
                let mut label = 0u8;
                for &si in &DRAW_ORDER {
                    if structures[si].contains(u) {
                        label = si as u8 + 1;
                    }
                }
                if label > 0 {
                    labels[[z, y, x]] = label;
                    image[[z, y, x]] = STRUCTURE_MEANS[label as usize - 1];
                }
            }
        }
    }

    let bbox = ground_truth_box(&LabelVolume {
        data: labels.clone(),
        num_classes: NUM_CLASSES,
    })?;

    // Bright non-heart clutter, rejection-placed outside the heart box.
    for _ in 0..spec.clutter_count {
        for _attempt in 0..64 {
            let r = [
                rng.uniform(0.02, 0.06) as f32 * extent[0],
                rng.uniform(0.02, 0.06) as f32 * extent[1],
                rng.uniform(0.02, 0.06) as f32 * extent[2],
            ];
            let c = [
                rng.uniform(r[0] as f64, (extent[0] - r[0]) as f64) as f32,
                rng.uniform(r[1] as f64, (extent[1] - r[1]) as f64) as f32,
                rng.uniform(r[2] as f64, (extent[2] - r[2]) as f64) as f32,
            ];
            let disjoint = c[0] + r[0] <= bbox.z1
                || c[0] - r[0] >= bbox.z2
                || c[1] + r[1] <= bbox.y1
                || c[1] - r[1] >= bbox.y2
                || c[2] + r[2] <= bbox.x1
                || c[2] - r[2] >= bbox.x2;
            if !disjoint {
                continue;
            }
            for z in (c[0] - r[0]).floor() as usize..((c[0] + r[0]).ceil() as usize).min(d) {
                for y in (c[1] - r[1]).floor() as usize..((c[1] + r[1]).ceil() as usize).min(h) {
                    for x in (c[2] - r[2]).floor() as usize..((c[2] + r[2]).ceil() as usize).min(w)
                    {
                        let u = [z as f32 + 0.5, y as f32 + 0.5, x as f32 + 0.5];
                        if ellipsoid_dist2(u, &c, &r) <= 1.0 {
                            image[[z, y, x]] = CLUTTER_MEAN;
                        }
                    }
                }
            }
            break;
        }
    }

    // Additive Gaussian noise over the whole grid, scan order, last so the
    // noiseless construction is exact when sigma = 0.
    if spec.noise_sigma > 0.0 {
        for v in image.iter_mut() {
            *v += spec.noise_sigma * rng.normal() as f32;
        }
    }

    let volume = Volume::new(image, [1.0, 1.0, 1.0])?;
    let labels = LabelVolume::new(labels, NUM_CLASSES)?;
    Ok((volume, labels, bbox))
}

/// Tight axis-aligned box of all foreground labels: min/max indices with +1
/// on the max side (half-open convention).
pub fn ground_truth_box(labels: &LabelVolume) -> Result<BBox3D, PhantomError> {
    let mut min = [usize::MAX; 3];
    let mut max = [0usize; 3];
    let mut any = false;
    for ((z, y, x), &v) in labels.data.indexed_iter() {
        if v > 0 {
            any = true;
            let p = [z, y, x];
            for a in 0..3 {
                min[a] = min[a].min(p[a]);
                max[a] = max[a].max(p[a]);
            }
        }
    }
    if !any {
        return Err(PhantomError::AllBackground);
    }
    Ok(BBox3D::new(
        min[0] as f32,
        min[1] as f32,
        min[2] as f32,
        (max[0] + 1) as f32,
        (max[1] + 1) as f32,
        (max[2] + 1) as f32,
    )
    .expect("half-open box from occupied voxels is non-degenerate"))
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub image: String,
    pub labels: String,
    /// [z1, y1, x1, z2, y2, x2]; `box` is a Rust keyword, hence the rename.
    #[serde(rename = "box")]
    pub box_: [f32; 6],
    pub seed: u64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Manifest {
    pub samples: Vec<ManifestEntry>,
    /// Directory the relative paths resolve against; not serialized.
    #[serde(skip)]
    pub base_dir: PathBuf,
}

impl Manifest {
    pub fn image_path(&self, i: usize) -> PathBuf {
        self.base_dir.join(&self.samples[i].image)
    }
    pub fn labels_path(&self, i: usize) -> PathBuf {
        self.base_dir.join(&self.samples[i].labels)
    }
    pub fn gt_box(&self, i: usize) -> BBox3D {
        let b = self.samples[i].box_;
        BBox3D::new(b[0], b[1], b[2], b[3], b[4], b[5]).expect("manifest box is valid")
    }
}

pub fn load_manifest(path: impl AsRef<Path>) -> Result<Manifest, PhantomError> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| PhantomError::Io {
        path: path.display().to_string(),
        source: e,
    })?;
    let mut m: Manifest = serde_json::from_str(&text).map_err(|e| PhantomError::BadManifest {
        path: path.display().to_string(),
        source: e,
    })?;
    m.base_dir = path.parent().unwrap_or(Path::new(".")).to_path_buf();
    Ok(m)
}

/// Write `count` sample triples plus a manifest. Per-sample seed is
/// `seed + index`, so datasets extend deterministically.
pub fn make_dataset(
    spec: &PhantomSpec,
    count: usize,
    seed: u64,
    out_dir: impl AsRef<Path>,
) -> Result<PathBuf, PhantomError> {
    assert!(count >= 1);
    let out_dir = out_dir.as_ref();
    std::fs::create_dir_all(out_dir).map_err(|e| PhantomError::Io {
        path: out_dir.display().to_string(),
        source: e,
    })?;
    let mut samples = Vec::with_capacity(count);
    for i in 0..count {
        let sample_seed = seed + i as u64;
        let (vol, labels, bbox) = generate_phantom(spec, sample_seed)?;
        let image_name = format!("sample_{i:03}_img.cfv");
        let labels_name = format!("sample_{i:03}_lbl.cfv");
        save_volume(&vol, out_dir.join(&image_name))?;
        save_labels(&labels, out_dir.join(&labels_name))?;
        samples.push(ManifestEntry {
            image: image_name,
            labels: labels_name,
            box_: bbox.as_array(),
            seed: sample_seed,
        });
    }
    let manifest = Manifest {
        samples,
        base_dir: out_dir.to_path_buf(),
    };
    let manifest_path = out_dir.join("manifest.json");
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    std::fs::write(&manifest_path, text).map_err(|e| PhantomError::Io {
        path: manifest_path.display().to_string(),
        source: e,
    })?;
    Ok(manifest_path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::{load_labels, load_volume};
    use ndarray::Array3;

    fn small_spec() -> PhantomSpec {
        PhantomSpec {
            noise_sigma: 0.01,
            clutter_count: 2,
            ..PhantomSpec::with_shape([48, 64, 64])
        }
    }

    #[test]
    fn determinism_bitwise() {
        let spec = small_spec();
        let (v1, l1, b1) = generate_phantom(&spec, 5).unwrap();
        let (v2, l2, b2) = generate_phantom(&spec, 5).unwrap();
        assert_eq!(v1, v2);
        assert_eq!(l1, l2);
        assert_eq!(b1, b2);
    }

    #[test]
    fn noiseless_foreground_intensities_exact() {
        let spec = PhantomSpec {
            noise_sigma: 0.0,
            clutter_count: 0,
            ..small_spec()
        };
        let (v, l, _) = generate_phantom(&spec, 3).unwrap();
        for ((z, y, x), &lab) in l.data.indexed_iter() {
            if lab > 0 {
                assert_eq!(v.data[[z, y, x]], STRUCTURE_MEANS[lab as usize - 1]);
            }
        }
    }

    #[test]
    fn box_is_tight_by_exhaustive_scan() {
        let (_, l, b) = generate_phantom(&small_spec(), 9).unwrap();
        let mut face_touch = [false; 6];
        for ((z, y, x), &lab) in l.data.indexed_iter() {
            if lab > 0 {
                let (zf, yf, xf) = (z as f32, y as f32, x as f32);
                assert!(zf >= b.z1 && zf + 1.0 <= b.z2);
                assert!(yf >= b.y1 && yf + 1.0 <= b.y2);
                assert!(xf >= b.x1 && xf + 1.0 <= b.x2);
                if zf == b.z1 {
                    face_touch[0] = true;
                }
                if zf + 1.0 == b.z2 {
                    face_touch[1] = true;
                }
                if yf == b.y1 {
                    face_touch[2] = true;
                }
                if yf + 1.0 == b.y2 {
                    face_touch[3] = true;
                }
                if xf == b.x1 {
                    face_touch[4] = true;
                }
                if xf + 1.0 == b.x2 {
                    face_touch[5] = true;
                }
            }
        }
        assert!(
            face_touch.iter().all(|&t| t),
            "every face touches foreground"
        );
    }

    #[test]
    fn structures_all_present_and_fraction_bounded() {
        let (_, l, _) = generate_phantom(&PhantomSpec::with_shape([96, 128, 128]), 1).unwrap();
        let mut counts = [0usize; NUM_CLASSES];
        for &v in l.data.iter() {
            counts[v as usize] += 1;
        }
        for c in 1..NUM_CLASSES {
            assert!(
                counts[c] >= 32,
                "structure {} has only {} voxels",
                CLASS_NAMES[c - 1],
                counts[c]
            );
        }
        let fg: usize = counts[1..].iter().sum();
        let frac = fg as f64 / l.data.len() as f64;
        assert!(frac < 0.35, "foreground fraction {frac}");
    }

    #[test]
    fn ground_truth_box_single_voxel() {
        let mut data = Array3::zeros((10, 10, 10));
        data[[4, 5, 6]] = 1u8;
        let l = LabelVolume::new(data, NUM_CLASSES).unwrap();
        let b = ground_truth_box(&l).unwrap();
        assert_eq!(b.as_array(), [4.0, 5.0, 6.0, 5.0, 6.0, 7.0]);
    }

    #[test]
    fn ground_truth_box_full_volume() {
        let l = LabelVolume::new(Array3::from_elem((3, 4, 5), 1u8), NUM_CLASSES).unwrap();
        let b = ground_truth_box(&l).unwrap();
        assert_eq!(b.as_array(), [0.0, 0.0, 0.0, 3.0, 4.0, 5.0]);
    }

    #[test]
    fn ground_truth_box_random_sparse_matches_scan() {
        let mut rng = SplitMix64::new(21);
        for _ in 0..20 {
            let mut data = Array3::zeros((8, 9, 10));
            for _ in 0..5 {
                let (z, y, x) = (rng.below(8), rng.below(9), rng.below(10));
                data[[z, y, x]] = 1 + rng.below(7) as u8;
            }
            let l = LabelVolume::new(data.clone(), NUM_CLASSES).unwrap();
            if let Ok(b) = ground_truth_box(&l) {
                // Brute-force min/max oracle.
                let mut mn = [usize::MAX; 3];
                let mut mx = [0; 3];
                for ((z, y, x), &v) in data.indexed_iter() {
                    if v > 0 {
                        mn = [mn[0].min(z), mn[1].min(y), mn[2].min(x)];
                        mx = [mx[0].max(z), mx[1].max(y), mx[2].max(x)];
                    }
                }
                assert_eq!(
                    b.as_array(),
                    [
                        mn[0] as f32,
                        mn[1] as f32,
                        mn[2] as f32,
                        (mx[0] + 1) as f32,
                        (mx[1] + 1) as f32,
                        (mx[2] + 1) as f32
                    ]
                );
            }
        }
    }

    #[test]
    fn all_background_rejected() {
        let l = LabelVolume::new(Array3::zeros((4, 4, 4)), NUM_CLASSES).unwrap();
        assert!(matches!(
            ground_truth_box(&l),
            Err(PhantomError::AllBackground)
        ));
    }

    #[test]
    fn oversized_heart_rejected() {
        let spec = PhantomSpec {
            heart_scale_range: (0.99, 1.0),
            ..small_spec()
        };
        assert!(matches!(
            generate_phantom(&spec, 0),
            Err(PhantomError::HeartDoesNotFit { .. })
        ));
    }

    #[test]
    fn dataset_round_trip_and_box_consistency() {
        let dir = tempfile::tempdir().unwrap();
        let spec = small_spec();
        let path = make_dataset(&spec, 3, 100, dir.path()).unwrap();
        let m = load_manifest(&path).unwrap();
        assert_eq!(m.samples.len(), 3);
        for i in 0..3 {
            let _img = load_volume(m.image_path(i)).unwrap();
            let labels = load_labels(m.labels_path(i)).unwrap();
            let b = ground_truth_box(&labels).unwrap();
            assert_eq!(b.as_array(), m.samples[i].box_);
            assert_eq!(m.samples[i].seed, 100 + i as u64);
        }
    }

    #[test]
    fn dataset_regeneration_identical_bytes() {
        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        let spec = small_spec();
        let p1 = make_dataset(&spec, 2, 7, d1.path()).unwrap();
        let p2 = make_dataset(&spec, 2, 7, d2.path()).unwrap();
        let m1 = load_manifest(&p1).unwrap();
        let m2 = load_manifest(&p2).unwrap();
        for i in 0..2 {
            assert_eq!(
                std::fs::read(m1.image_path(i)).unwrap(),
                std::fs::read(m2.image_path(i)).unwrap()
            );
            assert_eq!(
                std::fs::read(m1.labels_path(i)).unwrap(),
                std::fs::read(m2.labels_path(i)).unwrap()
            );
        }
    }
}
