//! Dense volume and label types, the raw on-disk format, resampling and
//! intensity utilities.
//!
//! Coordinate convention, used by every module in this crate: axes are
//! ordered (z, y, x) = (D, H, W), z being the axial direction. Arrays are
//! stored z-major (C order for shape `(D, H, W)`).

use ndarray::{Array3, Array4};
use std::io::{Read, Write};
use std::path::Path;
use thiserror::Error;

pub const VOLUME_MAGIC: &[u8; 8] = b"CFUNVOL1";
pub const DTYPE_F32: u32 = 1;
pub const DTYPE_LABEL_U8: u32 = 2;

#[derive(Debug, Error)]
pub enum VolumeError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("bad magic in {path}: expected \"CFUNVOL1\"")]
    BadMagic { path: String },
    #[error("unsupported dtype code {code} in {path}")]
    BadDtype { path: String, code: u32 },
    #[error("truncated payload in {path}: expected {expected} bytes, found {found}")]
    Truncated {
        path: String,
        expected: usize,
        found: usize,
    },
    #[error("non-finite value at flat index {index} in {path}")]
    NonFinite { path: String, index: usize },
    #[error("invalid shape {0:?}: all dims must be >= 1")]
    InvalidShape([usize; 3]),
    #[error("label value {value} out of range for {num_classes} classes")]
    LabelOutOfRange { value: u8, num_classes: usize },
    #[error("invalid intensity window: lo {lo} must be < hi {hi}")]
    InvalidWindow { lo: f32, hi: f32 },
    #[error("invalid spacing {0:?}: components must be positive")]
    InvalidSpacing([f32; 3]),
}

/// Dense 3D scalar grid with voxel spacing (mm per voxel along z, y, x).
#[derive(Clone, Debug, PartialEq)]
pub struct Volume {
    pub data: Array3<f32>,
    pub spacing: [f32; 3],
}

impl Volume {
    pub fn new(data: Array3<f32>, spacing: [f32; 3]) -> Result<Self, VolumeError> {
        let s = data.dim();
        if s.0 == 0 || s.1 == 0 || s.2 == 0 {
            return Err(VolumeError::InvalidShape([s.0, s.1, s.2]));
        }
        if spacing.iter().any(|&v| !(v > 0.0) || !v.is_finite()) {
            return Err(VolumeError::InvalidSpacing(spacing));
        }
        Ok(Self { data, spacing })
    }

    pub fn shape(&self) -> [usize; 3] {
        let (d, h, w) = self.data.dim();
        [d, h, w]
    }
}

/// Integer class grid; 0 is background, 1..C-1 are foreground structures.
#[derive(Clone, Debug, PartialEq)]
pub struct LabelVolume {
    pub data: Array3<u8>,
    pub num_classes: usize,
}

impl LabelVolume {
    pub fn new(data: Array3<u8>, num_classes: usize) -> Result<Self, VolumeError> {
        assert!(num_classes >= 2);
        if let Some(&v) = data.iter().find(|&&v| v as usize >= num_classes) {
            return Err(VolumeError::LabelOutOfRange {
                value: v,
                num_classes,
            });
        }
        Ok(Self { data, num_classes })
    }

    pub fn shape(&self) -> [usize; 3] {
        let (d, h, w) = self.data.dim();
        [d, h, w]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SegKind {
    Logits,
    Probabilities,
    OneHot,
}

/// Per-class tensor counterpart of a label grid, shape (C, D, H, W).
#[derive(Clone, Debug)]
pub struct SegMap {
    pub data: Array4<f32>,
    pub kind: SegKind,
}

// ---------------------------------------------------------------------------
// Raw file format
// ---------------------------------------------------------------------------
//
// bytes 0..8   magic "CFUNVOL1"
// bytes 8..12  dtype code, LE u32 (1 = f32 scalar, 2 = u8 label)
// bytes 12..24 dims D, H, W as LE u32
// bytes 24..36 spacing z, y, x as LE f32
// then D*H*W payload values, LE, z-major.
// Label files append a trailing LE u32 num_classes after the payload.

fn io_err(path: &Path, source: std::io::Error) -> VolumeError {
    VolumeError::Io {
        path: path.display().to_string(),
        source,
    }
}

struct Header {
    dtype: u32,
    dims: [usize; 3],
    spacing: [f32; 3],
}

fn read_header(path: &Path, bytes: &[u8]) -> Result<Header, VolumeError> {
    let p = || path.display().to_string();
    if bytes.len() < 36 {
        return Err(VolumeError::Truncated {
            path: p(),
            expected: 36,
            found: bytes.len(),
        });
    }
    if &bytes[0..8] != VOLUME_MAGIC {
        return Err(VolumeError::BadMagic { path: p() });
    }
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
    let f32_at = |o: usize| f32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
    let dtype = u32_at(8);
    if dtype != DTYPE_F32 && dtype != DTYPE_LABEL_U8 {
        return Err(VolumeError::BadDtype {
            path: p(),
            code: dtype,
        });
    }
    Ok(Header {
        dtype,
        dims: [
            u32_at(12) as usize,
            u32_at(16) as usize,
            u32_at(20) as usize,
        ],
        spacing: [f32_at(24), f32_at(28), f32_at(32)],
    })
}

fn write_header(out: &mut Vec<u8>, dtype: u32, dims: [usize; 3], spacing: [f32; 3]) {
    out.extend_from_slice(VOLUME_MAGIC);
    out.extend_from_slice(&dtype.to_le_bytes());
    for d in dims {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for s in spacing {
        out.extend_from_slice(&s.to_le_bytes());
    }
}

pub fn load_volume(path: impl AsRef<Path>) -> Result<Volume, VolumeError> {
    let path = path.as_ref();
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| io_err(path, e))?;
    let h = read_header(path, &bytes)?;
    let p = || path.display().to_string();
    if h.dtype != DTYPE_F32 {
        return Err(VolumeError::BadDtype {
            path: p(),
            code: h.dtype,
        });
    }
    let n = h.dims[0] * h.dims[1] * h.dims[2];
    let expected = 36 + 4 * n;
    if bytes.len() != expected {
        return Err(VolumeError::Truncated {
            path: p(),
            expected,
            found: bytes.len(),
        });
    }
    let mut data = Vec::with_capacity(n);
    for i in 0..n {
        let o = 36 + 4 * i;
        let v = f32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
        if !v.is_finite() {
            return Err(VolumeError::NonFinite {
                path: p(),
                index: i,
            });
        }
        data.push(v);
    }
    let arr = Array3::from_shape_vec((h.dims[0], h.dims[1], h.dims[2]), data).unwrap();
    Volume::new(arr, h.spacing)
}

pub fn save_volume(vol: &Volume, path: impl AsRef<Path>) -> Result<(), VolumeError> {
    let path = path.as_ref();
    let dims = vol.shape();
    let mut out = Vec::with_capacity(36 + 4 * vol.data.len());
    write_header(&mut out, DTYPE_F32, dims, vol.spacing);
    for &v in vol.data.iter() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    std::fs::File::create(path)
        .and_then(|mut f| f.write_all(&out))
        .map_err(|e| io_err(path, e))
}

pub fn load_labels(path: impl AsRef<Path>) -> Result<LabelVolume, VolumeError> {
    let path = path.as_ref();
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| io_err(path, e))?;
    let h = read_header(path, &bytes)?;
    let p = || path.display().to_string();
    if h.dtype != DTYPE_LABEL_U8 {
        return Err(VolumeError::BadDtype {
            path: p(),
            code: h.dtype,
        });
    }
    let n = h.dims[0] * h.dims[1] * h.dims[2];
    let expected = 36 + n + 4;
    if bytes.len() != expected {
        return Err(VolumeError::Truncated {
            path: p(),
            expected,
            found: bytes.len(),
        });
    }
    let data = bytes[36..36 + n].to_vec();
    let num_classes = u32::from_le_bytes(bytes[36 + n..].try_into().unwrap()) as usize;
    let arr = Array3::from_shape_vec((h.dims[0], h.dims[1], h.dims[2]), data).unwrap();
    LabelVolume::new(arr, num_classes)
}

pub fn save_labels(labels: &LabelVolume, path: impl AsRef<Path>) -> Result<(), VolumeError> {
    let path = path.as_ref();
    let dims = labels.shape();
    let mut out = Vec::with_capacity(36 + labels.data.len() + 4);
    write_header(&mut out, DTYPE_LABEL_U8, dims, [1.0, 1.0, 1.0]);
    out.extend(labels.data.iter().copied());
    out.extend_from_slice(&(labels.num_classes as u32).to_le_bytes());
    std::fs::File::create(path)
        .and_then(|mut f| f.write_all(&out))
        .map_err(|e| io_err(path, e))
}

// ---------------------------------------------------------------------------
// Resampling
// ---------------------------------------------------------------------------

/// Corner-aligned index mapping: output index i maps to input index
/// i * (n_in - 1) / (n_out - 1); a single output sample maps to the center.
/// Identity when shapes match.
fn axis_map(n_in: usize, n_out: usize) -> impl Fn(usize) -> f64 {
    let scale = if n_out > 1 {
        (n_in as f64 - 1.0) / (n_out as f64 - 1.0)
    } else {
        0.0
    };
    let center = (n_in as f64 - 1.0) / 2.0;
    move |i: usize| {
        if n_out > 1 {
            i as f64 * scale
        } else {
            center
        }
    }
}

/// Trilinear sample at fractional index coordinates (integer coordinates hit
/// voxels exactly); coordinates are clamped to the valid range.
pub fn sample_trilinear(data: &Array3<f32>, z: f64, y: f64, x: f64) -> f32 {
    let (d, h, w) = data.dim();
    let clamp = |v: f64, n: usize| v.max(0.0).min(n as f64 - 1.0);
    let (z, y, x) = (clamp(z, d), clamp(y, h), clamp(x, w));
    let (z0, y0, x0) = (z.floor() as usize, y.floor() as usize, x.floor() as usize);
    let (z1, y1, x1) = (
        (z0 + 1).min(d - 1),
        (y0 + 1).min(h - 1),
        (x0 + 1).min(w - 1),
    );
    let (fz, fy, fx) = (
        (z - z0 as f64) as f32,
        (y - y0 as f64) as f32,
        (x - x0 as f64) as f32,
    );
    let at = |zi, yi, xi| data[[zi, yi, xi]];
    let lerp = |a: f32, b: f32, t: f32| a + (b - a) * t;
    let c00 = lerp(at(z0, y0, x0), at(z0, y0, x1), fx);
    let c01 = lerp(at(z0, y1, x0), at(z0, y1, x1), fx);
    let c10 = lerp(at(z1, y0, x0), at(z1, y0, x1), fx);
    let c11 = lerp(at(z1, y1, x0), at(z1, y1, x1), fx);
    lerp(lerp(c00, c01, fy), lerp(c10, c11, fy), fz)
}

pub fn resample_trilinear(vol: &Volume, target: [usize; 3]) -> Result<Volume, VolumeError> {
    if target.iter().any(|&d| d == 0) {
        return Err(VolumeError::InvalidShape(target));
    }
    let src = vol.shape();
    let (mz, my, mx) = (
        axis_map(src[0], target[0]),
        axis_map(src[1], target[1]),
        axis_map(src[2], target[2]),
    );
    let mut out = Array3::<f32>::zeros((target[0], target[1], target[2]));
    for z in 0..target[0] {
        let fz = mz(z);
        for y in 0..target[1] {
            let fy = my(y);
            for x in 0..target[2] {
                out[[z, y, x]] = sample_trilinear(&vol.data, fz, fy, mx(x));
            }
        }
    }
    let spacing = [
        vol.spacing[0] * src[0] as f32 / target[0] as f32,
        vol.spacing[1] * src[1] as f32 / target[1] as f32,
        vol.spacing[2] * src[2] as f32 / target[2] as f32,
    ];
    Volume::new(out, spacing)
}

/// Labels are categorical: nearest-neighbor under the same corner-aligned
/// mapping, never interpolated.
pub fn resample_labels_nearest(
    labels: &LabelVolume,
    target: [usize; 3],
) -> Result<LabelVolume, VolumeError> {
    if target.iter().any(|&d| d == 0) {
        return Err(VolumeError::InvalidShape(target));
    }
    let src = labels.shape();
    let (mz, my, mx) = (
        axis_map(src[0], target[0]),
        axis_map(src[1], target[1]),
        axis_map(src[2], target[2]),
    );
    let mut out = Array3::<u8>::zeros((target[0], target[1], target[2]));
    for z in 0..target[0] {
        let zi = mz(z).round() as usize;
        for y in 0..target[1] {
            let yi = my(y).round() as usize;
            for x in 0..target[2] {
                let xi = mx(x).round() as usize;
                out[[z, y, x]] = labels.data[[zi, yi, xi]];
            }
        }
    }
    LabelVolume::new(out, labels.num_classes)
}

/// Clip to [lo, hi] then map affinely onto [0, 1].
pub fn normalize_intensity(vol: &Volume, lo: f32, hi: f32) -> Result<Volume, VolumeError> {
    if !(lo < hi) {
        return Err(VolumeError::InvalidWindow { lo, hi });
    }
    let scale = 1.0 / (hi - lo);
    let data = vol.data.mapv(|v| (v.clamp(lo, hi) - lo) * scale);
    Volume::new(data, vol.spacing)
}

/// Default cardiac CT soft-tissue window for optional real-data ingestion;
/// phantoms are generated in [0, 1] already.
pub const DEFAULT_CT_WINDOW: (f32, f32) = (-300.0, 500.0);

pub fn one_hot(labels: &LabelVolume) -> SegMap {
    let [d, h, w] = labels.shape();
    let c = labels.num_classes;
    let mut data = Array4::<f32>::zeros((c, d, h, w));
    for ((z, y, x), &v) in labels.data.indexed_iter() {
        data[[v as usize, z, y, x]] = 1.0;
    }
    SegMap {
        data,
        kind: SegKind::OneHot,
    }
}

/// Per-voxel channel argmax; ties broken by lower class index.
pub fn argmax_labels(map: &SegMap) -> LabelVolume {
    let (c, d, h, w) = map.data.dim();
    let mut out = Array3::<u8>::zeros((d, h, w));
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                let mut best = 0usize;
                let mut best_v = map.data[[0, z, y, x]];
                for ci in 1..c {
                    let v = map.data[[ci, z, y, x]];
                    if v > best_v {
                        best_v = v;
                        best = ci;
                    }
                }
                out[[z, y, x]] = best as u8;
            }
        }
    }
    LabelVolume {
        data: out,
        num_classes: c,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;
    use proptest::prelude::*;

    fn ramp(d: usize, h: usize, w: usize) -> Volume {
        let data = Array3::from_shape_fn((d, h, w), |(z, y, x)| (z * h * w + y * w + x) as f32);
        Volume::new(data, [1.5, 1.0, 0.75]).unwrap()
    }

    #[test]
    fn smallest_legal_file_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("v.cfv");
        let v = Volume::new(Array3::zeros((1, 1, 1)), [1.0, 1.0, 1.0]).unwrap();
        save_volume(&v, &p).unwrap();
        let back = load_volume(&p).unwrap();
        assert_eq!(back.shape(), [1, 1, 1]);
        assert_eq!(back.data[[0, 0, 0]], 0.0);
    }

    #[test]
    fn bad_magic_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("v.cfv");
        let v = ramp(2, 2, 2);
        save_volume(&v, &p).unwrap();
        let mut bytes = std::fs::read(&p).unwrap();
        bytes[7] = b'2'; // "CFUNVOL2"
        std::fs::write(&p, &bytes).unwrap();
        assert!(matches!(load_volume(&p), Err(VolumeError::BadMagic { .. })));
    }

    #[test]
    fn truncated_payload_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("v.cfv");
        save_volume(&ramp(2, 2, 2), &p).unwrap();
        let bytes = std::fs::read(&p).unwrap();
        std::fs::write(&p, &bytes[..bytes.len() - 3]).unwrap();
        assert!(matches!(
            load_volume(&p),
            Err(VolumeError::Truncated { .. })
        ));
    }

    #[test]
    fn missing_file_is_io_error() {
        assert!(matches!(
            load_volume("/no/such/file.cfv"),
            Err(VolumeError::Io { .. })
        ));
    }

    #[test]
    fn ramp_payload_layout_is_z_major_le() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("v.cfv");
        save_volume(&ramp(2, 2, 2), &p).unwrap();
        let bytes = std::fs::read(&p).unwrap();
        assert_eq!(bytes.len(), 36 + 8 * 4);
        for i in 0..8 {
            let o = 36 + 4 * i;
            let v = f32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
            assert_eq!(v, i as f32);
        }
    }

    #[test]
    fn label_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("l.cfl");
        let data = Array3::from_shape_fn((3, 4, 5), |(z, y, x)| ((z + y + x) % 8) as u8);
        let l = LabelVolume::new(data, 8).unwrap();
        save_labels(&l, &p).unwrap();
        assert_eq!(load_labels(&p).unwrap(), l);
    }

    #[test]
    fn resample_identity_when_shapes_match() {
        let v = ramp(4, 5, 6);
        let out = resample_trilinear(&v, [4, 5, 6]).unwrap();
        assert_eq!(out.data, v.data);
        assert_eq!(out.spacing, v.spacing);
    }

    #[test]
    fn resample_preserves_constants() {
        let v = Volume::new(Array3::from_elem((3, 3, 3), 7.5), [1.0; 3]).unwrap();
        let out = resample_trilinear(&v, [5, 7, 2]).unwrap();
        for &x in out.data.iter() {
            assert!((x - 7.5).abs() < 1e-6);
        }
    }

    #[test]
    fn resample_ramp_matches_pointwise_oracle() {
        // 1D ramp [0,1,2,3] along x, resampled 4 -> 7. Oracle: independent
        // per-point interpolation at i * 3/6.
        let data = Array3::from_shape_fn((1, 1, 4), |(_, _, x)| x as f32);
        let v = Volume::new(data, [1.0; 3]).unwrap();
        let out = resample_trilinear(&v, [1, 1, 7]).unwrap();
        for i in 0..7 {
            let pos = i as f64 * 3.0 / 6.0;
            let lo = pos.floor();
            let frac = pos - lo;
            let expected = (lo * (1.0 - frac) + (lo + 1.0).min(3.0) * frac) as f32;
            assert!(
                (out.data[[0, 0, i]] - expected).abs() < 1e-6,
                "i={i} got {} want {expected}",
                out.data[[0, 0, i]]
            );
        }
    }

    #[test]
    fn resample_rejects_zero_dims() {
        assert!(resample_trilinear(&ramp(2, 2, 2), [0, 2, 2]).is_err());
    }

    #[test]
    fn normalize_endpoints_and_midpoint() {
        let data = Array3::from_shape_vec((1, 1, 4), vec![-100.0, 300.0, 100.0, -500.0]).unwrap();
        let v = Volume::new(data, [1.0; 3]).unwrap();
        let out = normalize_intensity(&v, -100.0, 300.0).unwrap();
        assert_eq!(out.data[[0, 0, 0]], 0.0);
        assert_eq!(out.data[[0, 0, 1]], 1.0);
        assert_eq!(out.data[[0, 0, 2]], 0.5);
        assert_eq!(out.data[[0, 0, 3]], 0.0); // clipped below lo
    }

    #[test]
    fn normalize_rejects_bad_window() {
        let v = ramp(2, 2, 2);
        assert!(normalize_intensity(&v, 3.0, 3.0).is_err());
    }

    #[test]
    fn one_hot_all_background() {
        let l = LabelVolume::new(Array3::zeros((2, 2, 2)), 8).unwrap();
        let m = one_hot(&l);
        assert_eq!(m.data.dim(), (8, 2, 2, 2));
        for z in 0..2 {
            for y in 0..2 {
                for x in 0..2 {
                    assert_eq!(m.data[[0, z, y, x]], 1.0);
                    for c in 1..8 {
                        assert_eq!(m.data[[c, z, y, x]], 0.0);
                    }
                }
            }
        }
    }

    #[test]
    fn one_hot_single_voxel() {
        let mut data = Array3::zeros((6, 7, 8));
        data[[4, 5, 6]] = 3u8;
        let l = LabelVolume::new(data, 8).unwrap();
        let m = one_hot(&l);
        let count: f32 = m.data.index_axis(ndarray::Axis(0), 3).sum();
        assert_eq!(count, 1.0);
        assert_eq!(m.data[[3, 4, 5, 6]], 1.0);
    }

    #[test]
    fn label_out_of_range_rejected() {
        let mut data = Array3::zeros((2, 2, 2));
        data[[0, 0, 0]] = 9u8;
        assert!(matches!(
            LabelVolume::new(data, 8),
            Err(VolumeError::LabelOutOfRange { .. })
        ));
    }

    proptest! {
        #[test]
        fn save_load_round_trip_is_bitwise(seed in 0u64..1000) {
            let mut rng = crate::rng::SplitMix64::new(seed);
            let d = 1 + rng.below(5);
            let h = 1 + rng.below(5);
            let w = 1 + rng.below(5);
            let data = Array3::from_shape_fn((d, h, w), |_| rng.next_f32() * 100.0 - 50.0);
            let v = Volume::new(data, [0.5, 1.0, 2.0]).unwrap();
            let dir = tempfile::tempdir().unwrap();
            let p = dir.path().join("v.cfv");
            save_volume(&v, &p).unwrap();
            let back = load_volume(&p).unwrap();
            prop_assert_eq!(back, v);
        }

        #[test]
        fn argmax_inverts_one_hot(seed in 0u64..1000) {
            let mut rng = crate::rng::SplitMix64::new(seed);
            let data = Array3::from_shape_fn((4, 4, 4), |_| rng.below(8) as u8);
            let l = LabelVolume::new(data, 8).unwrap();
            prop_assert_eq!(argmax_labels(&one_hot(&l)), l);
        }

        #[test]
        fn resample_never_overshoots(seed in 0u64..200) {
            let mut rng = crate::rng::SplitMix64::new(seed);
            let data = Array3::from_shape_fn((3, 4, 5), |_| rng.next_f32());
            let v = Volume::new(data, [1.0; 3]).unwrap();
            let lo = v.data.iter().cloned().fold(f32::INFINITY, f32::min);
            let hi = v.data.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
            let out = resample_trilinear(&v, [6, 3, 9]).unwrap();
            for &x in out.data.iter() {
                prop_assert!(x >= lo - 1e-5 && x <= hi + 1e-5);
            }
        }

        #[test]
        fn normalize_output_in_unit_interval(seed in 0u64..200) {
            let mut rng = crate::rng::SplitMix64::new(seed);
            let data = Array3::from_shape_fn((3, 3, 3), |_| rng.next_f32() * 2000.0 - 1000.0);
            let v = Volume::new(data, [1.0; 3]).unwrap();
            let out = normalize_intensity(&v, -300.0, 500.0).unwrap();
            for &x in out.data.iter() {
                prop_assert!((0.0..=1.0).contains(&x));
            }
        }
    }
}
