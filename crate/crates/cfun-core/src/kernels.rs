//! Raw numeric kernels behind the autodiff graph: 3D cross-correlation
//! (forward, input-gradient, weight-gradient), corner-aligned trilinear
//! upsampling, and 3D RoI-align with trilinear sampling.
//!
//! Transposed convolution is not a separate kernel: its forward pass is
//! `conv3d_bwd_dx` and its backward passes reuse `conv3d_fwd` /
//! `conv3d_bwd_dw` with the roles of input and output swapped. That makes
//! the conv/deconv adjoint identity hold by construction.
//!
//! Layouts: activations (C, D, H, W), weights (Cout, Cin, kz, ky, kx),
//! everything contiguous C-order f32. Inner loops run along x so they
//! vectorize.

use crate::boxes::BBox3D;
use ndarray::{Array4, ArrayView4, ArrayViewD};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub stride: [usize; 3],
    pub pad: [usize; 3],
}

impl ConvSpec {
    pub fn unit() -> Self {
        Self {
            stride: [1, 1, 1],
            pad: [0, 0, 0],
        }
    }

    pub fn same3(stride: [usize; 3]) -> Self {
        Self {
            stride,
            pad: [1, 1, 1],
        }
    }

    pub fn out_dim(&self, axis: usize, n: usize, k: usize) -> usize {
        (n + 2 * self.pad[axis] - k) / self.stride[axis] + 1
    }
}

/// Range of output indices o (o < n_out) such that
/// i = o * stride + k_off - pad lies in [0, n_in).
#[inline]
fn out_range(n_in: usize, n_out: usize, k_off: usize, stride: usize, pad: usize) -> (usize, usize) {
    // lo: smallest o with o*stride >= pad - k_off
    let lo = if pad > k_off {
        (pad - k_off + stride - 1) / stride
    } else {
        0
    };
    // hi: largest o with o*stride + k_off - pad <= n_in - 1
    let max_i = n_in as isize - 1 - k_off as isize + pad as isize;
    if max_i < 0 {
        return (0, 0);
    }
    let hi = ((max_i as usize) / stride + 1).min(n_out);
    (lo.min(hi), hi)
}

/// True for the shapes the fused 3-tap row paths handle: unit stride,
/// 3x3 same-padded spatial taps, and a 1- or 3-deep same-padded z extent.
#[inline]
fn fused3_case(spec: ConvSpec, kshape: [usize; 3]) -> bool {
    let [kz, ky, kx] = kshape;
    spec.stride == [1, 1, 1]
        && ky == 3
        && kx == 3
        && spec.pad[1] == 1
        && spec.pad[2] == 1
        && ((kz == 3 && spec.pad[0] == 1) || (kz == 1 && spec.pad[0] == 0))
}

/// Channel-block width for the fused conv paths: rows read from the big
/// array feed this many stack accumulators before being evicted.
const CO_BLK: usize = 4;

/// acc += w * x over equal-length rows; shared by the fused conv paths so
/// both directions get identical (vectorized) codegen.
#[inline(always)]
pub(crate) fn axpy_row(acc: &mut [f32], x: &[f32], w: f32) {
    for (a, &v) in acc.iter_mut().zip(x) {
        // mul_add compiles to a hardware FMA; plain `+= w * v` does not
        *a = v.mul_add(w, *a);
    }
}

pub fn conv3d_fwd(
    x: &ArrayView4<f32>,
    w: &ArrayViewD<f32>,
    bias: Option<&[f32]>,
    spec: ConvSpec,
) -> Array4<f32> {
    let (ci_n, d, h, wd) = x.dim();
    let ws = w.shape();
    assert_eq!(ws.len(), 5);
    let (co_n, wci, kz, ky, kx) = (ws[0], ws[1], ws[2], ws[3], ws[4]);
    assert_eq!(wci, ci_n, "conv3d channel mismatch");
    let (od, oh, ow) = (
        spec.out_dim(0, d, kz),
        spec.out_dim(1, h, ky),
        spec.out_dim(2, wd, kx),
    );
    let mut out = Array4::<f32>::zeros((co_n, od, oh, ow));
    let xs = x.as_slice().expect("contiguous input");
    let wsl = w.as_slice().expect("contiguous weights");
    let os = out.as_slice_mut().unwrap();
    let [sz, sy, sx] = spec.stride;
    let [pz, py, px] = spec.pad;

    if fused3_case(spec, [kz, ky, kx]) && wd >= 2 {
        // dominant same-conv case: every tap pass for one output row lands
        // in a stack-resident accumulator, so the output row is written to
        // the big array once instead of read-modify-written per tap
        let n = wd;
        // blocking output channels amortizes each x-row read over several
        // accumulator rows instead of re-streaming x once per channel
        let mut acc = vec![0.0f32; CO_BLK * n];
        for cb in (0..co_n).step_by(CO_BLK) {
            let blk = (co_n - cb).min(CO_BLK);
            for zo in 0..od {
                for yo in 0..oh {
                    for (j, a) in acc.chunks_exact_mut(n).take(blk).enumerate() {
                        match bias {
                            Some(b) => a.fill(b[cb + j]),
                            None => a.fill(0.0),
                        }
                    }
                    for ci in 0..ci_n {
                        for fz in 0..kz {
                            let zi = (zo + fz).wrapping_sub(pz);
                            if zi >= d {
                                continue;
                            }
                            let xbase_z = (ci * d + zi) * h;
                            for fy in 0..3 {
                                let yi = (yo + fy).wrapping_sub(1);
                                if yi >= h {
                                    continue;
                                }
                                let xrow = (xbase_z + yi) * wd;
                                let xr = &xs[xrow..xrow + n];
                                for (j, a) in acc.chunks_exact_mut(n).take(blk).enumerate() {
                                    let wb =
                                        ((((cb + j) * ci_n + ci) * kz + fz) * 3 + fy) * 3;
                                    let (w0, w1, w2) = (wsl[wb], wsl[wb + 1], wsl[wb + 2]);
                                    if w0 != 0.0 {
                                        axpy_row(&mut a[1..], &xr[..n - 1], w0);
                                    }
                                    if w1 != 0.0 {
                                        axpy_row(a, xr, w1);
                                    }
                                    if w2 != 0.0 {
                                        axpy_row(&mut a[..n - 1], &xr[1..], w2);
                                    }
                                }
                            }
                        }
                    }
                    for (j, a) in acc.chunks_exact(n).take(blk).enumerate() {
                        let orow = (((cb + j) * od + zo) * oh + yo) * ow;
                        os[orow..orow + n].copy_from_slice(a);
                    }
                }
            }
        }
        return out;
    }

    for co in 0..co_n {
        if let Some(b) = bias {
            let base = co * od * oh * ow;
            os[base..base + od * oh * ow].fill(b[co]);
        }
        for ci in 0..ci_n {
            for fz in 0..kz {
                let (zlo, zhi) = out_range(d, od, fz, sz, pz);
                for fy in 0..ky {
                    let (ylo, yhi) = out_range(h, oh, fy, sy, py);
                    for fx in 0..kx {
                        let (xlo, xhi) = out_range(wd, ow, fx, sx, px);
                        if xlo >= xhi {
                            continue;
                        }
                        let wv = wsl[(((co * ci_n + ci) * kz + fz) * ky + fy) * kx + fx];
                        if wv == 0.0 {
                            continue;
                        }
                        for zo in zlo..zhi {
                            let zi = zo * sz + fz - pz;
                            for yo in ylo..yhi {
                                let yi = yo * sy + fy - py;
                                let xrow = ((ci * d + zi) * h + yi) * wd + (xlo * sx + fx - px);
                                let orow = ((co * od + zo) * oh + yo) * ow;
                                if sx == 1 {
                                    let xr = &xs[xrow..xrow + (xhi - xlo)];
                                    let or = &mut os[orow + xlo..orow + xhi];
                                    for (o, &xv) in or.iter_mut().zip(xr) {
                                        *o += wv * xv;
                                    }
                                } else {
                                    for (j, xo) in (xlo..xhi).enumerate() {
                                        os[orow + xo] += wv * xs[xrow + j * sx];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// Gradient of `conv3d_fwd` with respect to its input; also the forward
/// pass of transposed convolution (then `dy` is the small tensor and the
/// result has shape `x_shape`).
pub fn conv3d_bwd_dx(
    dy: &ArrayView4<f32>,
    w: &ArrayViewD<f32>,
    spec: ConvSpec,
    x_shape: (usize, usize, usize, usize),
) -> Array4<f32> {
    let (co_n, od, oh, ow) = dy.dim();
    let ws = w.shape();
    let (wco, ci_n, kz, ky, kx) = (ws[0], ws[1], ws[2], ws[3], ws[4]);
    assert_eq!(wco, co_n, "conv3d_bwd_dx channel mismatch");
    let (_, d, h, wd) = x_shape;
    assert_eq!(ci_n, x_shape.0);
    let mut dx = Array4::<f32>::zeros(x_shape);
    let dys = dy.as_slice().expect("contiguous dy");
    let wsl = w.as_slice().expect("contiguous weights");
    let dxs = dx.as_slice_mut().unwrap();
    let [sz, sy, sx] = spec.stride;
    let [pz, py, px] = spec.pad;

    if fused3_case(spec, [kz, ky, kx]) && ow >= 2 {
        // mirror of the fused forward: each dx row accumulates on the stack
        // while gathering from dy rows through the flipped kernel
        let n = wd;
        // ci-blocked like the forward's co blocking: each dy row read feeds
        // a block of dx accumulator rows
        let mut acc = vec![0.0f32; CO_BLK * n];
        for cib in (0..ci_n).step_by(CO_BLK) {
            let blk = (ci_n - cib).min(CO_BLK);
            for zi in 0..d {
                for yi in 0..h {
                    acc.fill(0.0);
                    for co in 0..co_n {
                        // reversed tap order makes zo (and yo below) ascend,
                        // keeping the dy row reads prefetcher-friendly
                        for fz in (0..kz).rev() {
                            let zo = (zi + pz).wrapping_sub(fz);
                            if zo >= od {
                                continue;
                            }
                            let dybase_z = (co * od + zo) * oh;
                            for fy in (0..3usize).rev() {
                                let yo = (yi + 1).wrapping_sub(fy);
                                if yo >= oh {
                                    continue;
                                }
                                let orow = (dybase_z + yo) * ow;
                                let dyr = &dys[orow..orow + n];
                                for (j, a) in acc.chunks_exact_mut(n).take(blk).enumerate() {
                                    let wb =
                                        (((co * ci_n + cib + j) * kz + fz) * 3 + fy) * 3;
                                    let (w0, w1, w2) = (wsl[wb], wsl[wb + 1], wsl[wb + 2]);
                                    if w0 != 0.0 {
                                        axpy_row(&mut a[..n - 1], &dyr[1..], w0);
                                    }
                                    if w1 != 0.0 {
                                        axpy_row(a, dyr, w1);
                                    }
                                    if w2 != 0.0 {
                                        axpy_row(&mut a[1..], &dyr[..n - 1], w2);
                                    }
                                }
                            }
                        }
                    }
                    for (j, a) in acc.chunks_exact(n).take(blk).enumerate() {
                        let xrow = (((cib + j) * d + zi) * h + yi) * wd;
                        dxs[xrow..xrow + n].copy_from_slice(a);
                    }
                }
            }
        }
        return dx;
    }

    for co in 0..co_n {
        for ci in 0..ci_n {
            for fz in 0..kz {
                let (zlo, zhi) = out_range(d, od, fz, sz, pz);
                for fy in 0..ky {
                    let (ylo, yhi) = out_range(h, oh, fy, sy, py);
                    for fx in 0..kx {
                        let (xlo, xhi) = out_range(wd, ow, fx, sx, px);
                        if xlo >= xhi {
                            continue;
                        }
                        let wv = wsl[(((co * ci_n + ci) * kz + fz) * ky + fy) * kx + fx];
                        if wv == 0.0 {
                            continue;
                        }
                        for zo in zlo..zhi {
                            let zi = zo * sz + fz - pz;
                            for yo in ylo..yhi {
                                let yi = yo * sy + fy - py;
                                let xrow = ((ci * d + zi) * h + yi) * wd + (xlo * sx + fx - px);
                                let orow = ((co * od + zo) * oh + yo) * ow;
                                if sx == 1 {
                                    let dyr = &dys[orow + xlo..orow + xhi];
                                    let dxr = &mut dxs[xrow..xrow + (xhi - xlo)];
                                    for (o, &g) in dxr.iter_mut().zip(dyr) {
                                        *o += wv * g;
                                    }
                                } else {
                                    for (j, xo) in (xlo..xhi).enumerate() {
                                        dxs[xrow + j * sx] += wv * dys[orow + xo];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    dx
}

/// Lane-split dot product: independent partial sums let the compiler keep
/// SIMD lanes busy instead of serializing one FMA chain.
#[inline]
pub(crate) fn dot_rows(a: &[f32], b: &[f32]) -> f32 {
    const LANES: usize = 16;
    let mut lanes = [0.0f32; LANES];
    let chunks = a.len() / LANES;
    for i in 0..chunks {
        let (ca, cb) = (
            &a[i * LANES..(i + 1) * LANES],
            &b[i * LANES..(i + 1) * LANES],
        );
        for l in 0..LANES {
            lanes[l] = ca[l].mul_add(cb[l], lanes[l]);
        }
    }
    let mut acc = lanes.iter().sum::<f32>();
    for i in chunks * LANES..a.len() {
        acc += a[i] * b[i];
    }
    acc
}

/// Accumulates a dy row against an equal-length x row at the three x-tap
/// shifts of a same-padded width-3 kernel, into caller-held lane arrays.
/// Keeping the lanes across many rows amortizes the horizontal reduction,
/// which otherwise dominates for short rows. The rows stay cache-hot
/// across the three passes.
#[inline(always)]
fn dot_rows3_accum(x: &[f32], dy: &[f32], lanes: &mut [[f32; DOT_LANES]; 3]) {
    let n = dy.len();
    dot_accum(&x[..n - 1], &dy[1..], &mut lanes[0]);
    dot_accum(x, dy, &mut lanes[1]);
    dot_accum(&x[1..], &dy[..n - 1], &mut lanes[2]);
}

const DOT_LANES: usize = 16;

/// Lane-split sum; same rationale as `dot_rows`.
pub(crate) fn sum_rows(a: &[f32]) -> f32 {
    let mut lanes = [0.0f32; DOT_LANES];
    let chunks = a.len() / DOT_LANES;
    for i in 0..chunks {
        let ca = &a[i * DOT_LANES..(i + 1) * DOT_LANES];
        for l in 0..DOT_LANES {
            lanes[l] += ca[l];
        }
    }
    let mut acc = lanes.iter().sum::<f32>();
    for &v in &a[chunks * DOT_LANES..] {
        acc += v;
    }
    acc
}

/// Lane-split sum of squared deviations from `mean`.
pub(crate) fn centered_sumsq(a: &[f32], mean: f32) -> f32 {
    let mut lanes = [0.0f32; DOT_LANES];
    let chunks = a.len() / DOT_LANES;
    for i in 0..chunks {
        let ca = &a[i * DOT_LANES..(i + 1) * DOT_LANES];
        for l in 0..DOT_LANES {
            let v = ca[l] - mean;
            lanes[l] = v.mul_add(v, lanes[l]);
        }
    }
    let mut acc = lanes.iter().sum::<f32>();
    for &v in &a[chunks * DOT_LANES..] {
        acc += (v - mean) * (v - mean);
    }
    acc
}

/// One lane-split dot pass without the final reduction.
#[inline(always)]
fn dot_accum(a: &[f32], b: &[f32], lanes: &mut [f32; DOT_LANES]) {
    let chunks = a.len() / DOT_LANES;
    for i in 0..chunks {
        let ca = &a[i * DOT_LANES..(i + 1) * DOT_LANES];
        let cb = &b[i * DOT_LANES..(i + 1) * DOT_LANES];
        for l in 0..DOT_LANES {
            lanes[l] = ca[l].mul_add(cb[l], lanes[l]);
        }
    }
    for i in chunks * DOT_LANES..a.len() {
        lanes[0] = a[i].mul_add(b[i], lanes[0]);
    }
}

/// Weight gradient: dw[co,ci,f] = sum over output positions of
/// dy[co, out] * x[ci, in]. Returns (dw, db).
pub fn conv3d_bwd_dw(
    x: &ArrayView4<f32>,
    dy: &ArrayView4<f32>,
    spec: ConvSpec,
    kshape: [usize; 3],
) -> (ndarray::ArrayD<f32>, Vec<f32>) {
    let (ci_n, d, h, wd) = x.dim();
    let (co_n, od, oh, ow) = dy.dim();
    let [kz, ky, kx] = kshape;
    let mut dw = ndarray::ArrayD::<f32>::zeros(vec![co_n, ci_n, kz, ky, kx]);
    let mut db = vec![0.0f32; co_n];
    let xs = x.as_slice().expect("contiguous x");
    let dys = dy.as_slice().expect("contiguous dy");
    let dwsl = dw.as_slice_mut().unwrap();
    let [sz, sy, sx] = spec.stride;
    let [pz, py, px] = spec.pad;

    if fused3_case(spec, [kz, ky, kx]) && ow >= 2 {
        // one pass per (dy row, x row) pair accumulates all three x-taps,
        // instead of re-streaming both rows once per tap; the per-tap lane
        // arrays stay register-resident across the whole sweep
        for co in 0..co_n {
            let base = co * od * oh * ow;
            db[co] = sum_rows(&dys[base..base + od * oh * ow]);
            for ci in 0..ci_n {
                for fz in 0..kz {
                    let wb_fz = ((co * ci_n + ci) * kz + fz) * 3;
                    for fy in 0..3 {
                        let wb = (wb_fz + fy) * 3;
                        let mut lanes = [[0.0f32; DOT_LANES]; 3];
                        for zo in 0..od {
                            let zi = (zo + fz).wrapping_sub(pz);
                            if zi >= d {
                                continue;
                            }
                            let dybase_z = (co * od + zo) * oh;
                            let xbase_z = (ci * d + zi) * h;
                            for yo in 0..oh {
                                let yi = (yo + fy).wrapping_sub(1);
                                if yi >= h {
                                    continue;
                                }
                                let dyr = &dys[(dybase_z + yo) * ow..(dybase_z + yo) * ow + ow];
                                let xr = &xs[(xbase_z + yi) * wd..(xbase_z + yi) * wd + wd];
                                dot_rows3_accum(xr, dyr, &mut lanes);
                            }
                        }
                        for (k, l) in lanes.iter().enumerate() {
                            dwsl[wb + k] = l.iter().sum();
                        }
                    }
                }
            }
        }
        return (dw, db);
    }

    for co in 0..co_n {
        let base = co * od * oh * ow;
        db[co] = dys[base..base + od * oh * ow].iter().sum();
        for ci in 0..ci_n {
            for fz in 0..kz {
                let (zlo, zhi) = out_range(d, od, fz, sz, pz);
                for fy in 0..ky {
                    let (ylo, yhi) = out_range(h, oh, fy, sy, py);
                    for fx in 0..kx {
                        let (xlo, xhi) = out_range(wd, ow, fx, sx, px);
                        if xlo >= xhi {
                            continue;
                        }
                        let mut acc = 0.0f32;
                        for zo in zlo..zhi {
                            let zi = zo * sz + fz - pz;
                            for yo in ylo..yhi {
                                let yi = yo * sy + fy - py;
                                let xrow = ((ci * d + zi) * h + yi) * wd + (xlo * sx + fx - px);
                                let orow = ((co * od + zo) * oh + yo) * ow;
                                if sx == 1 {
                                    let xr = &xs[xrow..xrow + (xhi - xlo)];
                                    let dyr = &dys[orow + xlo..orow + xhi];
                                    acc += dot_rows(xr, dyr);
                                } else {
                                    for (j, xo) in (xlo..xhi).enumerate() {
                                        acc += xs[xrow + j * sx] * dys[orow + xo];
                                    }
                                }
                            }
                        }
                        dwsl[(((co * ci_n + ci) * kz + fz) * ky + fy) * kx + fx] = acc;
                    }
                }
            }
        }
    }
    (dw, db)
}

// ---------------------------------------------------------------------------
// Trilinear upsampling (corner-aligned, shared convention with
// volume::resample_trilinear)
// ---------------------------------------------------------------------------

/// Per-axis interpolation taps: output index -> (i0, i1, w0, w1).
fn axis_taps(n_in: usize, n_out: usize) -> Vec<(usize, usize, f32, f32)> {
    (0..n_out)
        .map(|i| {
            let pos = if n_out > 1 {
                i as f64 * (n_in as f64 - 1.0) / (n_out as f64 - 1.0)
            } else {
                (n_in as f64 - 1.0) / 2.0
            };
            let i0 = pos.floor() as usize;
            let i1 = (i0 + 1).min(n_in - 1);
            let f = (pos - i0 as f64) as f32;
            (i0, i1, 1.0 - f, f)
        })
        .collect()
}

/// Linear interpolation along one spatial axis (0 = z, 1 = y, 2 = x),
/// resizing that axis to `n_out`. Axes 0 and 1 blend whole contiguous
/// planes/rows; only the x axis needs a per-element gather.
fn upsample_axis(x: &Array4<f32>, axis: usize, n_out: usize) -> Array4<f32> {
    let (c_n, d, h, w) = x.dim();
    let n_in = [d, h, w][axis];
    let taps = axis_taps(n_in, n_out);
    let mut shape = [c_n, d, h, w];
    shape[axis + 1] = n_out;
    let mut out = Array4::<f32>::zeros((shape[0], shape[1], shape[2], shape[3]));
    let xs = x.as_slice().expect("contiguous input");
    let os = out.as_slice_mut().unwrap();
    match axis {
        0 => {
            let plane = h * w;
            for c in 0..c_n {
                for (zo, &(i0, i1, w0, w1)) in taps.iter().enumerate() {
                    let or = &mut os[(c * n_out + zo) * plane..][..plane];
                    axpy_row(or, &xs[(c * d + i0) * plane..][..plane], w0);
                    axpy_row(or, &xs[(c * d + i1) * plane..][..plane], w1);
                }
            }
        }
        1 => {
            for cz in 0..c_n * d {
                for (yo, &(i0, i1, w0, w1)) in taps.iter().enumerate() {
                    let or = &mut os[(cz * n_out + yo) * w..][..w];
                    axpy_row(or, &xs[(cz * h + i0) * w..][..w], w0);
                    axpy_row(or, &xs[(cz * h + i1) * w..][..w], w1);
                }
            }
        }
        _ => {
            for r in 0..c_n * d * h {
                let xr = &xs[r * w..][..w];
                for (o, &(i0, i1, w0, w1)) in os[r * n_out..][..n_out].iter_mut().zip(&taps) {
                    *o = w0 * xr[i0] + w1 * xr[i1];
                }
            }
        }
    }
    out
}

/// Adjoint of [`upsample_axis`]: scatters `dy` back onto an axis of size
/// `n_in` with the same taps.
fn upsample_axis_bwd(dy: &Array4<f32>, axis: usize, n_in: usize) -> Array4<f32> {
    let (c_n, od, oh, ow) = dy.dim();
    let n_out = [od, oh, ow][axis];
    let taps = axis_taps(n_in, n_out);
    let mut shape = [c_n, od, oh, ow];
    shape[axis + 1] = n_in;
    let mut dx = Array4::<f32>::zeros((shape[0], shape[1], shape[2], shape[3]));
    let dys = dy.as_slice().expect("contiguous grad");
    let dxs = dx.as_slice_mut().unwrap();
    match axis {
        0 => {
            let plane = oh * ow;
            for c in 0..c_n {
                for (zo, &(i0, i1, w0, w1)) in taps.iter().enumerate() {
                    let dyr = &dys[(c * n_out + zo) * plane..][..plane];
                    axpy_row(&mut dxs[(c * n_in + i0) * plane..][..plane], dyr, w0);
                    axpy_row(&mut dxs[(c * n_in + i1) * plane..][..plane], dyr, w1);
                }
            }
        }
        1 => {
            for cz in 0..c_n * od {
                for (yo, &(i0, i1, w0, w1)) in taps.iter().enumerate() {
                    let dyr = &dys[(cz * n_out + yo) * ow..][..ow];
                    axpy_row(&mut dxs[(cz * n_in + i0) * ow..][..ow], dyr, w0);
                    axpy_row(&mut dxs[(cz * n_in + i1) * ow..][..ow], dyr, w1);
                }
            }
        }
        _ => {
            for r in 0..c_n * od * oh {
                let dxr = &mut dxs[r * n_in..][..n_in];
                for (&g, &(i0, i1, w0, w1)) in dys[r * n_out..][..n_out].iter().zip(&taps) {
                    dxr[i0] += w0 * g;
                    dxr[i1] += w1 * g;
                }
            }
        }
    }
    dx
}

pub fn upsample_trilinear_fwd(x: &ArrayView4<f32>, target: [usize; 3]) -> Array4<f32> {
    let mut cur = upsample_axis(&x.to_owned(), 0, target[0]);
    cur = upsample_axis(&cur, 1, target[1]);
    upsample_axis(&cur, 2, target[2])
}

pub fn upsample_trilinear_bwd(
    dy: &ArrayView4<f32>,
    x_shape: (usize, usize, usize, usize),
) -> Array4<f32> {
    let mut cur = upsample_axis_bwd(&dy.to_owned(), 2, x_shape.3);
    cur = upsample_axis_bwd(&cur, 1, x_shape.2);
    upsample_axis_bwd(&cur, 0, x_shape.1)
}

// ---------------------------------------------------------------------------
// RoI-align
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RoiAlignSpec {
    pub out_size: [usize; 3],
    pub samples_per_bin: usize,
}

impl RoiAlignSpec {
    pub fn cube(n: usize) -> Self {
        Self {
            out_size: [n, n, n],
            samples_per_bin: 2,
        }
    }
}

/// Sample positions along one axis: continuous box coordinates (voxel i
/// spans [i, i+1), center at i + 0.5), interpolated between voxel centers
/// with clamping at the borders.
fn roi_axis_taps(
    start: f32,
    end: f32,
    bins: usize,
    spb: usize,
    n_in: usize,
) -> Vec<(usize, usize, f32, f32)> {
    let bin = (end - start) / bins as f32;
    let mut taps = Vec::with_capacity(bins * spb);
    for i in 0..bins {
        for j in 0..spb {
            let coord = start + (i as f32 + (j as f32 + 0.5) / spb as f32) * bin;
            // center convention: voxel centers sit at integer+0.5
            let u = (coord - 0.5).clamp(0.0, n_in as f32 - 1.0) as f64;
            let i0 = u.floor() as usize;
            let i1 = (i0 + 1).min(n_in - 1);
            let f = (u - i0 as f64) as f32;
            taps.push((i0, i1, 1.0 - f, f));
        }
    }
    taps
}

pub fn roi_align_fwd(src: &ArrayView4<f32>, bx: &BBox3D, spec: &RoiAlignSpec) -> Array4<f32> {
    let (c_n, d, h, w) = src.dim();
    let spb = spec.samples_per_bin;
    let [od, oh, ow] = spec.out_size;
    let tz = roi_axis_taps(bx.z1, bx.z2, od, spb, d);
    let ty = roi_axis_taps(bx.y1, bx.y2, oh, spb, h);
    let tx = roi_axis_taps(bx.x1, bx.x2, ow, spb, w);
    let norm = 1.0 / (spb * spb * spb) as f32;
    let mut out = Array4::<f32>::zeros((c_n, od, oh, ow));
    for c in 0..c_n {
        for bz in 0..od {
            for by in 0..oh {
                for bxo in 0..ow {
                    let mut acc = 0.0f32;
                    for jz in 0..spb {
                        let (z0, z1, wz0, wz1) = tz[bz * spb + jz];
                        for jy in 0..spb {
                            let (y0, y1, wy0, wy1) = ty[by * spb + jy];
                            for jx in 0..spb {
                                let (x0, x1, wx0, wx1) = tx[bxo * spb + jx];
                                let g = |zi: usize, yi: usize, xi: usize| src[[c, zi, yi, xi]];
                                acc += wz0
                                    * (wy0 * (wx0 * g(z0, y0, x0) + wx1 * g(z0, y0, x1))
                                        + wy1 * (wx0 * g(z0, y1, x0) + wx1 * g(z0, y1, x1)))
                                    + wz1
                                        * (wy0 * (wx0 * g(z1, y0, x0) + wx1 * g(z1, y0, x1))
                                            + wy1 * (wx0 * g(z1, y1, x0) + wx1 * g(z1, y1, x1)));
                            }
                        }
                    }
                    out[[c, bz, by, bxo]] = acc * norm;
                }
            }
        }
    }
    out
}

pub fn roi_align_bwd(
    dy: &ArrayView4<f32>,
    bx: &BBox3D,
    spec: &RoiAlignSpec,
    src_shape: (usize, usize, usize, usize),
) -> Array4<f32> {
    let (c_n, d, h, w) = src_shape;
    let spb = spec.samples_per_bin;
    let [od, oh, ow] = spec.out_size;
    let tz = roi_axis_taps(bx.z1, bx.z2, od, spb, d);
    let ty = roi_axis_taps(bx.y1, bx.y2, oh, spb, h);
    let tx = roi_axis_taps(bx.x1, bx.x2, ow, spb, w);
    let norm = 1.0 / (spb * spb * spb) as f32;
    let mut dx = Array4::<f32>::zeros(src_shape);
    for c in 0..c_n {
        for bz in 0..od {
            for by in 0..oh {
                for bxo in 0..ow {
                    let g = dy[[c, bz, by, bxo]] * norm;
                    if g == 0.0 {
                        continue;
                    }
                    for jz in 0..spb {
                        let (z0, z1, wz0, wz1) = tz[bz * spb + jz];
                        for jy in 0..spb {
                            let (y0, y1, wy0, wy1) = ty[by * spb + jy];
                            for jx in 0..spb {
                                let (x0, x1, wx0, wx1) = tx[bxo * spb + jx];
                                dx[[c, z0, y0, x0]] += g * wz0 * wy0 * wx0;
                                dx[[c, z0, y0, x1]] += g * wz0 * wy0 * wx1;
                                dx[[c, z0, y1, x0]] += g * wz0 * wy1 * wx0;
                                dx[[c, z0, y1, x1]] += g * wz0 * wy1 * wx1;
                                dx[[c, z1, y0, x0]] += g * wz1 * wy0 * wx0;
                                dx[[c, z1, y0, x1]] += g * wz1 * wy0 * wx1;
                                dx[[c, z1, y1, x0]] += g * wz1 * wy1 * wx0;
                                dx[[c, z1, y1, x1]] += g * wz1 * wy1 * wx1;
                            }
                        }
                    }
                }
            }
        }
    }
    dx
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SplitMix64;
    use ndarray::{Array4, ArrayD};

    fn rand4(rng: &mut SplitMix64, shape: (usize, usize, usize, usize)) -> Array4<f32> {
        Array4::from_shape_fn(shape, |_| rng.next_f32() * 2.0 - 1.0)
    }

    fn rand_w(rng: &mut SplitMix64, shape: [usize; 5]) -> ArrayD<f32> {
        ArrayD::from_shape_fn(shape.to_vec(), |_| rng.next_f32() * 2.0 - 1.0)
    }

    /// Direct 7-nested-loop reference convolution.
    fn conv_naive(
        x: &Array4<f32>,
        w: &ArrayD<f32>,
        bias: Option<&[f32]>,
        spec: ConvSpec,
    ) -> Array4<f32> {
        let (ci_n, d, h, wd) = x.dim();
        let ws = w.shape();
        let (co_n, kz, ky, kx) = (ws[0], ws[2], ws[3], ws[4]);
        let (od, oh, ow) = (
            spec.out_dim(0, d, kz),
            spec.out_dim(1, h, ky),
            spec.out_dim(2, wd, kx),
        );
        let mut out = Array4::<f32>::zeros((co_n, od, oh, ow));
        for co in 0..co_n {
            for zo in 0..od {
                for yo in 0..oh {
                    for xo in 0..ow {
                        let mut acc = bias.map_or(0.0, |b| b[co]);
                        for ci in 0..ci_n {
                            for fz in 0..kz {
                                for fy in 0..ky {
                                    for fx in 0..kx {
                                        let zi = zo as isize * spec.stride[0] as isize
                                            + fz as isize
                                            - spec.pad[0] as isize;
                                        let yi = yo as isize * spec.stride[1] as isize
                                            + fy as isize
                                            - spec.pad[1] as isize;
                                        let xi = xo as isize * spec.stride[2] as isize
                                            + fx as isize
                                            - spec.pad[2] as isize;
                                        if zi >= 0
                                            && (zi as usize) < d
                                            && yi >= 0
                                            && (yi as usize) < h
                                            && xi >= 0
                                            && (xi as usize) < wd
                                        {
                                            acc += w[[co, ci, fz, fy, fx]]
                                                * x[[ci, zi as usize, yi as usize, xi as usize]];
                                        }
                                    }
                                }
                            }
                        }
                        out[[co, zo, yo, xo]] = acc;
                    }
                }
            }
        }
        out
    }

    fn assert_close(a: &Array4<f32>, b: &Array4<f32>, tol: f32) {
        assert_eq!(a.dim(), b.dim());
        for (&x, &y) in a.iter().zip(b.iter()) {
            let denom = y.abs().max(1.0);
            assert!((x - y).abs() / denom < tol, "{x} vs {y}");
        }
    }

    #[test]
    fn conv_identity_kernel_passthrough() {
        let mut rng = SplitMix64::new(1);
        let x = rand4(&mut rng, (2, 4, 5, 6));
        let mut w = ArrayD::<f32>::zeros(vec![2, 2, 1, 1, 1]);
        w[[0, 0, 0, 0, 0]] = 1.0;
        w[[1, 1, 0, 0, 0]] = 1.0;
        let y = conv3d_fwd(&x.view(), &w.view(), None, ConvSpec::unit());
        assert_eq!(y, x);
    }

    #[test]
    fn conv_zero_kernel_gives_bias() {
        let mut rng = SplitMix64::new(2);
        let x = rand4(&mut rng, (1, 3, 3, 3));
        let w = ArrayD::<f32>::zeros(vec![2, 1, 3, 3, 3]);
        let y = conv3d_fwd(
            &x.view(),
            &w.view(),
            Some(&[0.5, -0.25]),
            ConvSpec::same3([1, 1, 1]),
        );
        for &v in y.index_axis(ndarray::Axis(0), 0).iter() {
            assert_eq!(v, 0.5);
        }
        for &v in y.index_axis(ndarray::Axis(0), 1).iter() {
            assert_eq!(v, -0.25);
        }
    }

    #[test]
    fn conv_matches_naive_oracle_random() {
        let mut rng = SplitMix64::new(3);
        for &(stride, pad) in &[
            ([1, 1, 1], [0, 0, 0]),
            ([1, 1, 1], [1, 1, 1]),
            ([2, 2, 2], [1, 1, 1]),
            ([2, 1, 2], [0, 1, 1]),
        ] {
            let x = rand4(&mut rng, (2, 5, 6, 7));
            let w = rand_w(&mut rng, [3, 2, 3, 3, 3]);
            let b: Vec<f32> = (0..3).map(|_| rng.next_f32()).collect();
            let spec = ConvSpec { stride, pad };
            let fast = conv3d_fwd(&x.view(), &w.view(), Some(&b), spec);
            let slow = conv_naive(&x, &w, Some(&b), spec);
            assert_close(&fast, &slow, 1e-5);
        }
    }

    #[test]
    fn conv_adjoint_identity() {
        // <conv(x), y> == <x, bwd_dx(y)> with shared weights.
        let mut rng = SplitMix64::new(4);
        for &(stride, pad) in &[([1, 1, 1], [1, 1, 1]), ([2, 2, 2], [1, 1, 1])] {
            let spec = ConvSpec { stride, pad };
            let x = rand4(&mut rng, (2, 6, 6, 6));
            let w = rand_w(&mut rng, [3, 2, 3, 3, 3]);
            let y_shape = conv3d_fwd(&x.view(), &w.view(), None, spec).dim();
            let y = rand4(&mut rng, y_shape);
            let cx = conv3d_fwd(&x.view(), &w.view(), None, spec);
            let dty = conv3d_bwd_dx(&y.view(), &w.view(), spec, x.dim());
            let lhs: f32 = cx.iter().zip(y.iter()).map(|(a, b)| a * b).sum();
            let rhs: f32 = x.iter().zip(dty.iter()).map(|(a, b)| a * b).sum();
            assert!(
                (lhs - rhs).abs() / lhs.abs().max(1.0) < 1e-5,
                "{lhs} vs {rhs}"
            );
        }
    }

    #[test]
    fn conv_weight_grad_matches_finite_difference() {
        let mut rng = SplitMix64::new(5);
        let spec = ConvSpec::same3([1, 1, 1]);
        let x = rand4(&mut rng, (2, 4, 4, 4));
        let mut w = rand_w(&mut rng, [2, 2, 3, 3, 3]);
        // loss = sum(conv(x, w)); dloss/dw via kernel vs central differences
        let dy = Array4::<f32>::ones(conv3d_fwd(&x.view(), &w.view(), None, spec).dim());
        let (dw, db) = conv3d_bwd_dw(&x.view(), &dy.view(), spec, [3, 3, 3]);
        let eps = 1e-2f32;
        for flat in [0usize, 7, 26, 53] {
            let idx: Vec<usize> = {
                let mut rem = flat;
                let shape = [2, 2, 3, 3, 3];
                let mut idx = vec![0; 5];
                for i in (0..5).rev() {
                    idx[i] = rem % shape[i];
                    rem /= shape[i];
                }
                idx
            };
            let orig = w[idx.as_slice()];
            w[idx.as_slice()] = orig + eps;
            let hi: f32 = conv3d_fwd(&x.view(), &w.view(), None, spec).sum();
            w[idx.as_slice()] = orig - eps;
            let lo: f32 = conv3d_fwd(&x.view(), &w.view(), None, spec).sum();
            w[idx.as_slice()] = orig;
            let fd = (hi - lo) / (2.0 * eps);
            let an = dw[idx.as_slice()];
            assert!((an - fd).abs() / fd.abs().max(1.0) < 1e-2, "{an} vs {fd}");
        }
        // bias grad is just the output count per channel here
        let n = dy.len() / 2;
        assert!((db[0] - n as f32).abs() < 1e-3);
    }

    #[test]
    fn deconv_k2s2_doubles_shape() {
        let mut rng = SplitMix64::new(6);
        let x = rand4(&mut rng, (3, 4, 4, 4));
        let w = rand_w(&mut rng, [3, 2, 2, 2, 2]); // (in=3 as "co", out=2 as "ci")
        let spec = ConvSpec {
            stride: [2, 2, 2],
            pad: [0, 0, 0],
        };
        let y = conv3d_bwd_dx(&x.view(), &w.view(), spec, (2, 8, 8, 8));
        assert_eq!(y.dim(), (2, 8, 8, 8));
    }

    #[test]
    fn upsample_matches_resample_on_single_channel() {
        let mut rng = SplitMix64::new(7);
        let x = rand4(&mut rng, (1, 3, 4, 5));
        let up = upsample_trilinear_fwd(&x.view(), [6, 7, 9]);
        let vol = crate::volume::Volume::new(
            x.index_axis(ndarray::Axis(0), 0).to_owned(),
            [1.0, 1.0, 1.0],
        )
        .unwrap();
        let re = crate::volume::resample_trilinear(&vol, [6, 7, 9]).unwrap();
        for (a, b) in up
            .index_axis(ndarray::Axis(0), 0)
            .iter()
            .zip(re.data.iter())
        {
            assert!((a - b).abs() < 1e-5);
        }
    }

    #[test]
    fn upsample_adjoint_identity() {
        let mut rng = SplitMix64::new(8);
        let x = rand4(&mut rng, (2, 3, 3, 3));
        let y = rand4(&mut rng, (2, 5, 6, 7));
        let ux = upsample_trilinear_fwd(&x.view(), [5, 6, 7]);
        let uty = upsample_trilinear_bwd(&y.view(), x.dim());
        let lhs: f32 = ux.iter().zip(y.iter()).map(|(a, b)| a * b).sum();
        let rhs: f32 = x.iter().zip(uty.iter()).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() / lhs.abs().max(1.0) < 1e-5);
    }

    #[test]
    fn roi_align_preserves_constants() {
        let src = Array4::<f32>::from_elem((2, 8, 8, 8), 3.0);
        let bx = BBox3D::new(1.2, 0.7, 2.3, 6.9, 7.1, 5.5).unwrap();
        let out = roi_align_fwd(&src.view(), &bx, &RoiAlignSpec::cube(4));
        for &v in out.iter() {
            assert!((v - 3.0).abs() < 1e-5);
        }
    }

    #[test]
    fn roi_align_integer_crop_oracle() {
        // Integer-aligned box whose size equals out_size, one sample per
        // bin: output must equal the direct voxel crop.
        let mut rng = SplitMix64::new(9);
        let src = rand4(&mut rng, (1, 8, 8, 8));
        let bx = BBox3D::new(2.0, 1.0, 3.0, 6.0, 5.0, 7.0).unwrap();
        let spec = RoiAlignSpec {
            out_size: [4, 4, 4],
            samples_per_bin: 1,
        };
        let out = roi_align_fwd(&src.view(), &bx, &spec);
        for z in 0..4 {
            for y in 0..4 {
                for x in 0..4 {
                    assert!(
                        (out[[0, z, y, x]] - src[[0, z + 2, y + 1, x + 3]]).abs() < 1e-6,
                        "mismatch at {z},{y},{x}"
                    );
                }
            }
        }
    }

    #[test]
    fn roi_align_integer_shift_equivariance() {
        let mut rng = SplitMix64::new(10);
        let src = rand4(&mut rng, (1, 10, 10, 10));
        let spec = RoiAlignSpec::cube(3);
        let b0 = BBox3D::new(1.5, 2.0, 1.0, 7.5, 8.0, 7.0).unwrap();
        let b1 = BBox3D::new(2.5, 2.0, 1.0, 8.5, 8.0, 7.0).unwrap();
        // Shift the source by one voxel along z and the box equally: output
        // must be identical away from clamped borders (none here).
        let mut shifted = Array4::<f32>::zeros(src.dim());
        for z in 1..10 {
            for y in 0..10 {
                for x in 0..10 {
                    shifted[[0, z, y, x]] = src[[0, z - 1, y, x]];
                }
            }
        }
        let o0 = roi_align_fwd(&src.view(), &b0, &spec);
        let o1 = roi_align_fwd(&shifted.view(), &b1, &spec);
        for (a, b) in o0.iter().zip(o1.iter()) {
            assert!((a - b).abs() < 1e-5);
        }
    }

    #[test]
    fn roi_align_adjoint_identity() {
        let mut rng = SplitMix64::new(11);
        let src = rand4(&mut rng, (2, 6, 6, 6));
        let bx = BBox3D::new(0.8, 1.1, 0.3, 5.2, 5.9, 4.7).unwrap();
        let spec = RoiAlignSpec::cube(3);
        let out = roi_align_fwd(&src.view(), &bx, &spec);
        let dy = rand4(&mut rng, out.dim());
        let dx = roi_align_bwd(&dy.view(), &bx, &spec, src.dim());
        let lhs: f32 = out.iter().zip(dy.iter()).map(|(a, b)| a * b).sum();
        let rhs: f32 = src.iter().zip(dx.iter()).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() / lhs.abs().max(1.0) < 1e-5);
    }

    #[test]
    fn roi_align_output_within_source_bounds() {
        let mut rng = SplitMix64::new(12);
        let src = rand4(&mut rng, (1, 6, 6, 6));
        let lo = src.iter().cloned().fold(f32::INFINITY, f32::min);
        let hi = src.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
        let bx = BBox3D::new(0.3, 0.6, 0.1, 5.7, 5.2, 5.9).unwrap();
        let out = roi_align_fwd(&src.view(), &bx, &RoiAlignSpec::cube(5));
        for &v in out.iter() {
            assert!(v >= lo - 1e-5 && v <= hi + 1e-5);
        }
    }
}
