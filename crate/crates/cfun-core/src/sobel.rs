//! Fixed 3D Sobel kernel bank and the edge-aware auxiliary loss.
//!
//! The loss compares directional edge responses of a predicted probability
//! map against those of a one-hot target, averaged over classes, kernels,
//! and voxels. Because each negative-direction kernel is the exact negation
//! of its positive counterpart, the 6-kernel mean equals the 3-kernel mean;
//! the fast path exploits this plus separability of each kernel into three
//! 1D taps. A unit test pins the fast path to the generic 6-kernel
//! computation.

use crate::volume::{SegKind, SegMap};
use ndarray::{Array3, Array4, ArrayView3, Axis};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum EdgeLossError {
    #[error("shape mismatch: prediction {0:?} vs target {1:?}")]
    ShapeMismatch(Vec<usize>, Vec<usize>),
    #[error("prediction is not a normalized probability map")]
    NotNormalized,
}

/// 1D smoothing taps shared by every kernel.
pub const SOBEL_SMOOTH: [f32; 3] = [1.0, 2.0, 1.0];
/// 1D derivative taps along the kernel's direction.
pub const SOBEL_DERIV: [f32; 3] = [1.0, 0.0, -1.0];

/// The six fixed 3x3x3 directional kernels, order (+z, +y, +x, -z, -y, -x).
#[derive(Debug, Clone)]
pub struct SobelBank {
    pub kernels: Vec<Array3<f32>>,
}

/// Builds the standard bank: the +z kernel has upper slice
/// [[1,2,1],[2,4,2],[1,2,1]], zero middle slice, negated lower slice;
/// +y/+x are axis permutations and the negative directions are negations.
pub fn sobel_bank() -> SobelBank {
    let mut kernels = Vec::with_capacity(6);
    for axis in 0..3 {
        let mut k = Array3::<f32>::zeros((3, 3, 3));
        for z in 0..3 {
            for y in 0..3 {
                for x in 0..3 {
                    let idx = [z, y, x];
                    let mut v = SOBEL_DERIV[idx[axis]];
                    for (a, &i) in idx.iter().enumerate() {
                        if a != axis {
                            v *= SOBEL_SMOOTH[i];
                        }
                    }
                    k[[z, y, x]] = v;
                }
            }
        }
        kernels.push(k);
    }
    for axis in 0..3 {
        let neg = kernels[axis].mapv(|v| -v);
        kernels.push(neg);
    }
    SobelBank { kernels }
}

/// Per-channel stride-1 correlation with one fixed 3x3x3 kernel, zero
/// padding 1, so the output shape matches the input.
pub fn edge_response(map: &SegMap, kernel: &Array3<f32>) -> Array4<f32> {
    let (c_n, d, h, w) = map.data.dim();
    let mut out = Array4::<f32>::zeros((c_n, d, h, w));
    for c in 0..c_n {
        let ch = map.data.index_axis(Axis(0), c);
        let r = edge_response_channel(&ch, kernel);
        out.index_axis_mut(Axis(0), c).assign(&r);
    }
    out
}

/// Single-channel version of [`edge_response`].
pub fn edge_response_channel(ch: &ArrayView3<f32>, kernel: &Array3<f32>) -> Array3<f32> {
    let (d, h, w) = ch.dim();
    let mut out = Array3::<f32>::zeros((d, h, w));
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0f32;
                for kz in 0..3 {
                    let iz = z as isize + kz as isize - 1;
                    if iz < 0 || iz >= d as isize {
                        continue;
                    }
                    for ky in 0..3 {
                        let iy = y as isize + ky as isize - 1;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..3 {
                            let ix = x as isize + kx as isize - 1;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            acc +=
                                kernel[[kz, ky, kx]] * ch[[iz as usize, iy as usize, ix as usize]];
                        }
                    }
                }
                out[[z, y, x]] = acc;
            }
        }
    }
    out
}

/// Edge loss per the definition: mean over classes, kernels, and voxels of
/// the absolute difference of edge responses (squared difference when
/// `squared`). Generic over the supplied bank; used directly by tests and
/// the verification harness.
pub fn edge_loss(
    p: &SegMap,
    y: &SegMap,
    bank: &SobelBank,
    squared: bool,
) -> Result<f32, EdgeLossError> {
    if p.data.dim() != y.data.dim() {
        return Err(EdgeLossError::ShapeMismatch(
            p.data.shape().to_vec(),
            y.data.shape().to_vec(),
        ));
    }
    if p.kind == SegKind::Probabilities {
        let (_, d, h, w) = p.data.dim();
        for z in 0..d {
            for yy in 0..h {
                for x in 0..w {
                    let s: f32 = p.data.slice(ndarray::s![.., z, yy, x]).sum();
                    if (s - 1.0).abs() > 1e-4 {
                        return Err(EdgeLossError::NotNormalized);
                    }
                }
            }
        }
    } else {
        return Err(EdgeLossError::NotNormalized);
    }
    let (c_n, d, h, w) = p.data.dim();
    let m = (d * h * w) as f64;
    let mut total = 0.0f64;
    for kernel in &bank.kernels {
        let rp = edge_response(p, kernel);
        let ry = edge_response(y, kernel);
        for (&a, &b) in rp.iter().zip(ry.iter()) {
            let diff = (b - a) as f64;
            total += if squared { diff * diff } else { diff.abs() };
        }
    }
    Ok((total / (bank.kernels.len() as f64 * c_n as f64 * m)) as f32)
}

/// One zero-padded 3-tap correlation pass along `axis`, written as
/// contiguous plane/row passes so every inner loop streams memory in order.
fn pass_axis(x: &ArrayView3<f32>, taps: [f32; 3], axis: usize) -> Array3<f32> {
    let (d, h, w) = x.dim();
    let xs = x.as_slice().expect("contiguous input");
    let mut out = Array3::<f32>::zeros((d, h, w));
    let os = out.as_slice_mut().unwrap();
    let [t0, t1, t2] = taps;
    let scale_into = |o: &mut [f32], src: &[f32]| {
        for (ov, &v) in o.iter_mut().zip(src) {
            *ov = t1 * v;
        }
    };
    match axis {
        0 => {
            let plane = h * w;
            for z in 0..d {
                let o = &mut os[z * plane..(z + 1) * plane];
                scale_into(o, &xs[z * plane..(z + 1) * plane]);
                if z > 0 {
                    crate::kernels::axpy_row(o, &xs[(z - 1) * plane..z * plane], t0);
                }
                if z + 1 < d {
                    crate::kernels::axpy_row(o, &xs[(z + 1) * plane..(z + 2) * plane], t2);
                }
            }
        }
        1 => {
            for z in 0..d {
                for y in 0..h {
                    let row = (z * h + y) * w;
                    let o = &mut os[row..row + w];
                    scale_into(o, &xs[row..row + w]);
                    if y > 0 {
                        crate::kernels::axpy_row(o, &xs[row - w..row], t0);
                    }
                    if y + 1 < h {
                        crate::kernels::axpy_row(o, &xs[row + w..row + 2 * w], t2);
                    }
                }
            }
        }
        _ => {
            for zy in 0..d * h {
                let row = zy * w;
                let o = &mut os[row..row + w];
                let xr = &xs[row..row + w];
                scale_into(o, xr);
                if w > 1 {
                    crate::kernels::axpy_row(&mut o[1..], &xr[..w - 1], t0);
                    crate::kernels::axpy_row(&mut o[..w - 1], &xr[1..], t2);
                }
            }
        }
    }
    out
}

/// Separable correlation with the +axis kernel (derivative taps along
/// `axis`, smoothing taps along the others). `transpose` flips the
/// derivative taps, giving the adjoint pass.
fn sobel_pass(x: &ArrayView3<f32>, axis: usize, transpose: bool) -> Array3<f32> {
    let deriv = if transpose {
        [SOBEL_DERIV[2], SOBEL_DERIV[1], SOBEL_DERIV[0]]
    } else {
        SOBEL_DERIV
    };
    let taps = |a: usize| if a == axis { deriv } else { SOBEL_SMOOTH };
    let mut cur = pass_axis(x, taps(0), 0);
    for a in 1..3 {
        cur = pass_axis(&cur.view(), taps(a), a);
    }
    cur
}

/// Fast edge loss and its gradient with respect to `p`, for the standard
/// bank. Uses the 3 positive-direction kernels only; the +/- pairing makes
/// this exactly equal to the 6-kernel mean.
pub fn edge_loss_fast_with_grad(
    p: &Array4<f32>,
    y: &Array4<f32>,
    squared: bool,
) -> (f32, Array4<f32>) {
    assert_eq!(p.dim(), y.dim(), "edge loss shape mismatch");
    let (c_n, d, h, w) = p.dim();
    let m = (d * h * w) as f64;
    let norm = 1.0 / (3.0 * c_n as f64 * m);
    let mut total = 0.0f64;
    let mut grad = Array4::<f32>::zeros(p.raw_dim());
    for c in 0..c_n {
        let pc = p.index_axis(Axis(0), c);
        let yc = y.index_axis(Axis(0), c);
        for axis in 0..3 {
            let rp = sobel_pass(&pc, axis, false);
            let ry = sobel_pass(&yc, axis, false);
            // dL/d r_p for this kernel, before backprojection
            let mut dr = Array3::<f32>::zeros(rp.raw_dim());
            for ((&a, &b), g) in rp.iter().zip(ry.iter()).zip(dr.iter_mut()) {
                let diff = (b - a) as f64;
                if squared {
                    total += diff * diff;
                    *g = (-2.0 * diff * norm) as f32;
                } else {
                    total += diff.abs();
                    *g = (-diff.signum() * norm) as f32;
                }
            }
            let back = sobel_pass(&dr.view(), axis, true);
            grad.index_axis_mut(Axis(0), c)
                .zip_mut_with(&back, |o, &v| *o += v);
        }
    }
    ((total * norm) as f32, grad)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SplitMix64;
    use crate::volume::SegKind;

    fn random_probs(rng: &mut SplitMix64, c: usize, d: usize, h: usize, w: usize) -> Array4<f32> {
        let mut p = Array4::<f32>::zeros((c, d, h, w));
        for z in 0..d {
            for y in 0..h {
                for x in 0..w {
                    let mut sum = 0.0;
                    for ch in 0..c {
                        let v = rng.uniform(0.01, 1.0) as f32;
                        p[[ch, z, y, x]] = v;
                        sum += v;
                    }
                    for ch in 0..c {
                        p[[ch, z, y, x]] /= sum;
                    }
                }
            }
        }
        p
    }

    fn random_onehot(rng: &mut SplitMix64, c: usize, d: usize, h: usize, w: usize) -> Array4<f32> {
        let mut y = Array4::<f32>::zeros((c, d, h, w));
        for z in 0..d {
            for yy in 0..h {
                for x in 0..w {
                    y[[rng.below(c), z, yy, x]] = 1.0;
                }
            }
        }
        y
    }

    fn seg(data: Array4<f32>, kind: SegKind) -> SegMap {
        SegMap { data, kind }
    }

    #[test]
    fn bank_structure() {
        let bank = sobel_bank();
        assert_eq!(bank.kernels.len(), 6);
        let s_up = [[1.0, 2.0, 1.0], [2.0, 4.0, 2.0], [1.0, 2.0, 1.0]];
        for y in 0..3 {
            for x in 0..3 {
                assert_eq!(bank.kernels[0][[0, y, x]], s_up[y][x]);
                assert_eq!(bank.kernels[0][[1, y, x]], 0.0);
                assert_eq!(bank.kernels[0][[2, y, x]], -s_up[y][x]);
            }
        }
        for k in &bank.kernels {
            assert_eq!(k.sum(), 0.0);
        }
        for axis in 0..3 {
            // middle slice orthogonal to the direction is zero
            for i in 0..3 {
                for j in 0..3 {
                    let idx = match axis {
                        0 => [1, i, j],
                        1 => [i, 1, j],
                        _ => [i, j, 1],
                    };
                    assert_eq!(bank.kernels[axis][idx], 0.0);
                }
            }
            // negative direction is the elementwise negation
            for (a, b) in bank.kernels[axis].iter().zip(bank.kernels[axis + 3].iter()) {
                assert_eq!(*b, -*a);
            }
        }
    }

    #[test]
    fn response_constant_in_z_is_zero() {
        let bank = sobel_bank();
        let mut data = Array4::<f32>::zeros((1, 5, 5, 5));
        for z in 0..5 {
            for y in 0..5 {
                for x in 0..5 {
                    data[[0, z, y, x]] = (y * 7 + x) as f32 * 0.1;
                }
            }
        }
        let r = edge_response(&seg(data, SegKind::Probabilities), &bank.kernels[0]);
        // interior only: zero padding breaks z-constancy at every border
        for z in 1..4 {
            for y in 1..4 {
                for x in 1..4 {
                    assert!(r[[0, z, y, x]].abs() < 1e-5);
                }
            }
        }
    }

    #[test]
    fn step_function_response_magnitude_16() {
        let bank = sobel_bank();
        let mut data = Array4::<f32>::zeros((1, 8, 8, 8));
        for z in 4..8 {
            for y in 0..8 {
                for x in 0..8 {
                    data[[0, z, y, x]] = 1.0;
                }
            }
        }
        let r = edge_response(&seg(data, SegKind::OneHot), &bank.kernels[0]);
        // interior voxels on the two planes adjacent to the step
        for y in 1..7 {
            for x in 1..7 {
                assert_eq!(r[[0, 3, y, x]].abs(), 16.0);
                assert_eq!(r[[0, 4, y, x]].abs(), 16.0);
                assert_eq!(r[[0, 2, y, x]], 0.0);
                assert_eq!(r[[0, 5, y, x]], 0.0);
            }
        }
    }

    #[test]
    fn response_matches_naive_oracle() {
        let mut rng = SplitMix64::new(11);
        let bank = sobel_bank();
        for kernel in &bank.kernels {
            let mut data = Array4::<f32>::zeros((2, 8, 8, 8));
            data.mapv_inplace(|_| rng.uniform(-1.0, 1.0) as f32);
            let map = seg(data.clone(), SegKind::Logits);
            let r = edge_response(&map, kernel);
            // independent nested-loop oracle
            for c in 0..2 {
                for z in 0..8usize {
                    for y in 0..8usize {
                        for x in 0..8usize {
                            let mut acc = 0.0f32;
                            for kz in 0..3usize {
                                for ky in 0..3usize {
                                    for kx in 0..3usize {
                                        let (iz, iy, ix) = (
                                            z as isize + kz as isize - 1,
                                            y as isize + ky as isize - 1,
                                            x as isize + kx as isize - 1,
                                        );
                                        if iz >= 0
                                            && iz < 8
                                            && iy >= 0
                                            && iy < 8
                                            && ix >= 0
                                            && ix < 8
                                        {
                                            acc += kernel[[kz, ky, kx]]
                                                * data[[c, iz as usize, iy as usize, ix as usize]];
                                        }
                                    }
                                }
                            }
                            assert!((acc - r[[c, z, y, x]]).abs() < 1e-5);
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn loss_zero_when_equal() {
        let mut rng = SplitMix64::new(3);
        let y = random_onehot(&mut rng, 4, 6, 6, 6);
        let bank = sobel_bank();
        let l = edge_loss(
            &seg(y.clone(), SegKind::Probabilities),
            &seg(y, SegKind::OneHot),
            &bank,
            false,
        )
        .unwrap();
        assert_eq!(l, 0.0);
    }

    #[test]
    fn loss_nonnegative_and_symmetric() {
        let mut rng = SplitMix64::new(4);
        let bank = sobel_bank();
        for _ in 0..5 {
            let a = random_probs(&mut rng, 3, 5, 5, 5);
            let b = random_probs(&mut rng, 3, 5, 5, 5);
            let lab = edge_loss(
                &seg(a.clone(), SegKind::Probabilities),
                &seg(b.clone(), SegKind::Probabilities),
                &bank,
                false,
            )
            .unwrap();
            let lba = edge_loss(
                &seg(b, SegKind::Probabilities),
                &seg(a, SegKind::Probabilities),
                &bank,
                false,
            )
            .unwrap();
            assert!(lab >= 0.0);
            assert!((lab - lba).abs() < 1e-6);
        }
    }

    #[test]
    fn kernel_duplication_invariance() {
        let mut rng = SplitMix64::new(5);
        let p = random_probs(&mut rng, 3, 6, 6, 6);
        let y = random_onehot(&mut rng, 3, 6, 6, 6);
        let bank = sobel_bank();
        let mut doubled = bank.clone();
        doubled.kernels.extend(bank.kernels.iter().cloned());
        let l1 = edge_loss(
            &seg(p.clone(), SegKind::Probabilities),
            &seg(y.clone(), SegKind::OneHot),
            &bank,
            false,
        )
        .unwrap();
        let l2 = edge_loss(
            &seg(p, SegKind::Probabilities),
            &seg(y, SegKind::OneHot),
            &doubled,
            false,
        )
        .unwrap();
        assert!((l1 - l2).abs() < 1e-6);
    }

    #[test]
    fn unnormalized_prediction_rejected() {
        let bank = sobel_bank();
        let p = Array4::<f32>::from_elem((2, 4, 4, 4), 0.7);
        let y = random_onehot(&mut SplitMix64::new(1), 2, 4, 4, 4);
        let err = edge_loss(
            &seg(p, SegKind::Probabilities),
            &seg(y, SegKind::OneHot),
            &bank,
            false,
        );
        assert!(matches!(err, Err(EdgeLossError::NotNormalized)));
    }

    #[test]
    fn fast_path_matches_generic_bank() {
        let mut rng = SplitMix64::new(6);
        let bank = sobel_bank();
        for &squared in &[false, true] {
            for _ in 0..10 {
                let p = random_probs(&mut rng, 4, 7, 6, 5);
                let y = random_onehot(&mut rng, 4, 7, 6, 5);
                let (fast, _) = edge_loss_fast_with_grad(&p, &y, squared);
                let slow = edge_loss(
                    &seg(p, SegKind::Probabilities),
                    &seg(y, SegKind::OneHot),
                    &bank,
                    squared,
                )
                .unwrap();
                assert!(
                    (fast - slow).abs() < 1e-6,
                    "fast {fast} vs generic {slow} (squared={squared})"
                );
            }
        }
    }

    #[test]
    fn fast_grad_matches_central_differences() {
        // squared variant only: |.| is non-differentiable at 0 and the
        // sign-based subgradient is exercised via the graph-level battery
        let mut rng = SplitMix64::new(7);
        let p = random_probs(&mut rng, 2, 4, 4, 4);
        let y = random_onehot(&mut rng, 2, 4, 4, 4);
        let (_, grad) = edge_loss_fast_with_grad(&p, &y, true);
        let eps = 1e-3f32;
        for _ in 0..40 {
            let c = rng.below(2) as usize;
            let z = rng.below(4) as usize;
            let yy = rng.below(4) as usize;
            let x = rng.below(4) as usize;
            let mut pp = p.clone();
            pp[[c, z, yy, x]] += eps;
            let (lp, _) = edge_loss_fast_with_grad(&pp, &y, true);
            pp[[c, z, yy, x]] -= 2.0 * eps;
            let (lm, _) = edge_loss_fast_with_grad(&pp, &y, true);
            let fd = (lp - lm) / (2.0 * eps);
            let err = (grad[[c, z, yy, x]] - fd).abs() / fd.abs().max(1.0);
            assert!(err < 1e-2, "grad {} fd {}", grad[[c, z, yy, x]], fd);
        }
    }
}
