//! Minimal reverse-mode autodiff over dense f32 tensors.
//!
//! A [`Graph`] is rebuilt every training step: leaves hold inputs and
//! parameter snapshots, ops record enough to replay their backward pass,
//! and [`Graph::backward`] walks the node list in reverse creation order
//! (creation order is already topological). Every gradient consumed by the
//! optimizer goes through here and is covered by the finite-difference
//! battery in `gradcheck`.

use crate::boxes::BBox3D;
use crate::kernels;
use crate::kernels::{
    conv3d_bwd_dw, conv3d_bwd_dx, conv3d_fwd, roi_align_bwd, roi_align_fwd, upsample_trilinear_bwd,
    upsample_trilinear_fwd, ConvSpec, RoiAlignSpec,
};
use crate::params::ParamStore;
use crate::sobel;
use ndarray::{Array1, Array3, Array4, ArrayD, Axis, Ix1, Ix2, Ix4, IxDyn};
use std::collections::HashMap;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(pub usize);

enum Op {
    Leaf,
    /// inputs: x, w (Cout,Cin,kz,ky,kx), bias (Cout)
    Conv3d(ConvSpec),
    /// Transposed convolution. inputs: x, w (Cin,Cout,kz,ky,kx), bias (Cout).
    /// Forward is the adjoint of Conv3d with the same weight tensor.
    Deconv3d(ConvSpec),
    /// inputs: x, scale (C), shift (C); per-channel stats over (D,H,W)
    InstanceNorm {
        eps: f32,
    },
    Relu,
    Add,
    /// inputs: a (Ca,...), b (Cb,...) concatenated along channels
    ConcatC,
    Upsample {
        target: [usize; 3],
    },
    RoiAlign {
        bx: BBox3D,
        spec: RoiAlignSpec,
    },
    /// channel softmax per voxel
    SoftmaxC,
    Reshape,
    /// inputs: x (1D, in), w (out,in), bias (out)
    Linear,
    Slice1 {
        start: usize,
        len: usize,
    },
    /// (A*comps, D, H, W) -> (D*H*W*A, comps), row order (z, y, x, a)
    AnchorFlatten {
        comps: usize,
    },
    /// 2D row-wise concat of all inputs
    ConcatRows,
    /// mean cross-entropy of channel-softmax against integer labels
    SegCrossEntropy {
        labels: Array3<u8>,
    },
    /// edge loss against a fixed one-hot target; input is a probability map
    EdgeLoss {
        grad: Array4<f32>,
    },
    /// mean binary cross-entropy with logits over `indices` of the
    /// flattened input
    BceWithLogits {
        targets: Vec<f32>,
        indices: Vec<usize>,
    },
    /// mean smooth-L1 over `rows` x comps of a 2D input, transition 1
    SmoothL1 {
        targets: Vec<Vec<f32>>,
        rows: Vec<usize>,
    },
    WeightedSum {
        weights: Vec<f32>,
    },
    Sum,
    Scale {
        c: f32,
    },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Conv3d(_) => "conv3d",
            Op::Deconv3d(_) => "deconv3d",
            Op::InstanceNorm { .. } => "instance_norm",
            Op::Relu => "relu",
            Op::Add => "add",
            Op::ConcatC => "concat_c",
            Op::Upsample { .. } => "upsample",
            Op::RoiAlign { .. } => "roi_align",
            Op::SoftmaxC => "softmax_c",
            Op::Reshape => "reshape",
            Op::Linear => "linear",
            Op::Slice1 { .. } => "slice1",
            Op::AnchorFlatten { .. } => "anchor_flatten",
            Op::ConcatRows => "concat_rows",
            Op::SegCrossEntropy { .. } => "seg_ce",
            Op::EdgeLoss { .. } => "edge_loss",
            Op::BceWithLogits { .. } => "bce",
            Op::SmoothL1 { .. } => "smooth_l1",
            Op::WeightedSum { .. } => "weighted_sum",
            Op::Sum => "sum",
            Op::Scale { .. } => "scale",
        }
    }
}

struct Node {
    value: ArrayD<f32>,
    grad: Option<ArrayD<f32>>,
    op: Op,
    inputs: Vec<Var>,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: Vec<(String, Var)>,
    frozen: std::collections::HashSet<usize>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, value: ArrayD<f32>, op: Op, inputs: Vec<Var>) -> Var {
        debug_assert!(value.iter().all(|v| v.is_finite()), "non-finite node value");
        self.nodes.push(Node {
            value,
            grad: None,
            op,
            inputs,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn input(&mut self, value: ArrayD<f32>) -> Var {
        self.push(value, Op::Leaf, vec![])
    }

    pub fn input4(&mut self, value: Array4<f32>) -> Var {
        self.input(value.into_dyn())
    }

    /// Leaf bound to a named parameter; its gradient is collected after
    /// backward for the optimizer.
    pub fn param(&mut self, store: &ParamStore, name: &str) -> Var {
        let v = self.input(store.get(name).clone());
        self.params.push((name.to_string(), v));
        v
    }

    pub fn value(&self, v: Var) -> &ArrayD<f32> {
        &self.nodes[v.0].value
    }

    pub fn value4(&self, v: Var) -> Array4<f32> {
        self.nodes[v.0]
            .value
            .clone()
            .into_dimensionality::<Ix4>()
            .expect("4D value")
    }

    pub fn scalar(&self, v: Var) -> f32 {
        self.nodes[v.0].value[[0]]
    }

    pub fn grad(&self, v: Var) -> Option<&ArrayD<f32>> {
        self.nodes[v.0].grad.as_ref()
    }

    /// Marks a leaf whose gradient nothing will read (e.g. the volume
    /// input), letting backward skip the input-gradient kernels feeding it.
    pub fn freeze(&mut self, v: Var) {
        debug_assert!(matches!(self.nodes[v.0].op, Op::Leaf), "freeze a leaf");
        self.frozen.insert(v.0);
    }

    fn wants_grad(&self, v: Var) -> bool {
        !self.frozen.contains(&v.0)
    }

    fn view4(&self, v: Var) -> ndarray::ArrayView4<f32> {
        self.nodes[v.0]
            .value
            .view()
            .into_dimensionality::<Ix4>()
            .expect("4D value")
    }

    // -- op builders --------------------------------------------------------

    pub fn conv3d(&mut self, x: Var, w: Var, b: Var, spec: ConvSpec) -> Var {
        let bias = self.nodes[b.0].value.as_slice().unwrap().to_vec();
        let out = conv3d_fwd(
            &self.view4(x),
            &self.nodes[w.0].value.view(),
            Some(&bias),
            spec,
        );
        self.push(out.into_dyn(), Op::Conv3d(spec), vec![x, w, b])
    }

    pub fn deconv3d(&mut self, x: Var, w: Var, b: Var, spec: ConvSpec) -> Var {
        let ws = self.nodes[w.0].value.shape().to_vec();
        let (cin, cout, k) = (ws[0], ws[1], [ws[2], ws[3], ws[4]]);
        let xv = self.view4(x);
        let (xc, xd, xh, xw) = xv.dim();
        assert_eq!(xc, cin, "deconv3d channel mismatch");
        let out_spatial =
            |axis: usize, n: usize| (n - 1) * spec.stride[axis] + k[axis] - 2 * spec.pad[axis];
        let out_shape = (
            cout,
            out_spatial(0, xd),
            out_spatial(1, xh),
            out_spatial(2, xw),
        );
        let mut out = conv3d_bwd_dx(&xv, &self.nodes[w.0].value.view(), spec, out_shape);
        let bias = self.nodes[b.0].value.as_slice().unwrap().to_vec();
        for (c, mut ch) in out.axis_iter_mut(Axis(0)).enumerate() {
            ch += bias[c];
        }
        self.push(out.into_dyn(), Op::Deconv3d(spec), vec![x, w, b])
    }

    pub fn instance_norm(&mut self, x: Var, scale: Var, shift: Var, eps: f32) -> Var {
        let xv = self.view4(x);
        let (c_n, d, h, w) = xv.dim();
        let n = (d * h * w) as f32;
        let g = self.nodes[scale.0].value.as_slice().unwrap().to_vec();
        let b = self.nodes[shift.0].value.as_slice().unwrap().to_vec();
        let mut out = Array4::<f32>::zeros((c_n, d, h, w));
        {
            let xs = xv.as_slice().expect("contiguous input");
            let os = out.as_slice_mut().unwrap();
            let cs = d * h * w;
            for c in 0..c_n {
                let ch = &xs[c * cs..(c + 1) * cs];
                let mean = kernels::sum_rows(ch) / n;
                let var = kernels::centered_sumsq(ch, mean) / n;
                let inv = 1.0 / (var + eps).sqrt();
                let (gc, bc) = (g[c], b[c]);
                for (o, &v) in os[c * cs..(c + 1) * cs].iter_mut().zip(ch) {
                    *o = gc * (v - mean) * inv + bc;
                }
            }
        }
        self.push(
            out.into_dyn(),
            Op::InstanceNorm { eps },
            vec![x, scale, shift],
        )
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.nodes[x.0].value.mapv(|v| v.max(0.0));
        self.push(out, Op::Relu, vec![x])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let out = &self.nodes[a.0].value + &self.nodes[b.0].value;
        self.push(out, Op::Add, vec![a, b])
    }

    pub fn concat_channels(&mut self, a: Var, b: Var) -> Var {
        let av = self.view4(a);
        let bv = self.view4(b);
        let out = ndarray::concatenate(Axis(0), &[av, bv]).expect("concat shapes");
        self.push(out.into_dyn(), Op::ConcatC, vec![a, b])
    }

    pub fn upsample(&mut self, x: Var, target: [usize; 3]) -> Var {
        let out = upsample_trilinear_fwd(&self.view4(x), target);
        self.push(out.into_dyn(), Op::Upsample { target }, vec![x])
    }

    pub fn roi_align(&mut self, src: Var, bx: BBox3D, spec: RoiAlignSpec) -> Var {
        let out = roi_align_fwd(&self.view4(src), &bx, &spec);
        self.push(out.into_dyn(), Op::RoiAlign { bx, spec }, vec![src])
    }

    pub fn softmax_channels(&mut self, x: Var) -> Var {
        let xv = self.view4(x);
        let (c_n, d, h, w) = xv.dim();
        let mut out = Array4::<f32>::zeros((c_n, d, h, w));
        {
            // row-wise passes: per (z, y) the c_n channel rows are short and
            // contiguous, instead of voxel-major gathers strided by d*h*w
            let xs = xv.as_slice().expect("contiguous input");
            let os = out.as_slice_mut().unwrap();
            let cstride = d * h * w;
            let mut mx = vec![0.0f32; w];
            let mut sum = vec![0.0f32; w];
            for zy in 0..d * h {
                let row = zy * w;
                mx.copy_from_slice(&xs[row..row + w]);
                for c in 1..c_n {
                    let xr = &xs[c * cstride + row..c * cstride + row + w];
                    for (m, &v) in mx.iter_mut().zip(xr) {
                        *m = m.max(v);
                    }
                }
                sum.fill(0.0);
                for c in 0..c_n {
                    let xr = &xs[c * cstride + row..c * cstride + row + w];
                    let or = &mut os[c * cstride + row..c * cstride + row + w];
                    for ((o, &v), (&m, s)) in
                        or.iter_mut().zip(xr).zip(mx.iter().zip(sum.iter_mut()))
                    {
                        let e = (v - m).exp();
                        *o = e;
                        *s += e;
                    }
                }
                for c in 0..c_n {
                    let or = &mut os[c * cstride + row..c * cstride + row + w];
                    for (o, &s) in or.iter_mut().zip(sum.iter()) {
                        *o /= s;
                    }
                }
            }
        }
        self.push(out.into_dyn(), Op::SoftmaxC, vec![x])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Var {
        let out = self.nodes[x.0]
            .value
            .clone()
            .into_shape_with_order(IxDyn(shape))
            .expect("reshape size");
        self.push(out, Op::Reshape, vec![x])
    }

    pub fn flatten(&mut self, x: Var) -> Var {
        let n = self.nodes[x.0].value.len();
        self.reshape(x, &[n])
    }

    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Var {
        let xv = self.nodes[x.0]
            .value
            .view()
            .into_dimensionality::<Ix1>()
            .expect("1D linear input");
        let wv = self.nodes[w.0]
            .value
            .view()
            .into_dimensionality::<Ix2>()
            .expect("2D linear weight");
        let bv = self.nodes[b.0].value.as_slice().unwrap();
        let mut out = Array1::<f32>::zeros(wv.nrows());
        for (o, (row, &bias)) in out.iter_mut().zip(wv.outer_iter().zip(bv)) {
            *o = bias + row.iter().zip(xv.iter()).map(|(a, b)| a * b).sum::<f32>();
        }
        self.push(out.into_dyn(), Op::Linear, vec![x, w, b])
    }

    pub fn slice1(&mut self, x: Var, start: usize, len: usize) -> Var {
        let xv = self.nodes[x.0]
            .value
            .view()
            .into_dimensionality::<Ix1>()
            .expect("1D slice input");
        let out = xv.slice(ndarray::s![start..start + len]).to_owned();
        self.push(out.into_dyn(), Op::Slice1 { start, len }, vec![x])
    }

    /// Reorder an RPN head output (A*comps, D, H, W) into anchor-major rows
    /// (D*H*W*A, comps) matching anchor generation order (z, y, x, scale).
    pub fn anchor_flatten(&mut self, x: Var, comps: usize) -> Var {
        let xv = self.view4(x);
        let (ac, d, h, w) = xv.dim();
        assert_eq!(ac % comps, 0);
        let a_n = ac / comps;
        let mut out = ndarray::Array2::<f32>::zeros((d * h * w * a_n, comps));
        let mut row = 0;
        for z in 0..d {
            for y in 0..h {
                for xx in 0..w {
                    for a in 0..a_n {
                        for cmp in 0..comps {
                            out[[row, cmp]] = xv[[a * comps + cmp, z, y, xx]];
                        }
                        row += 1;
                    }
                }
            }
        }
        self.push(out.into_dyn(), Op::AnchorFlatten { comps }, vec![x])
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts
            .iter()
            .map(|v| {
                self.nodes[v.0]
                    .value
                    .view()
                    .into_dimensionality::<Ix2>()
                    .expect("2D concat_rows input")
            })
            .collect();
        let out = ndarray::concatenate(Axis(0), &views).expect("concat rows");
        self.push(out.into_dyn(), Op::ConcatRows, parts.to_vec())
    }

    /// Mean per-voxel cross-entropy of softmax(logits) against labels.
    pub fn seg_cross_entropy(&mut self, logits: Var, labels: &Array3<u8>) -> Var {
        let xv = self.view4(logits);
        let (c_n, d, h, w) = xv.dim();
        assert_eq!((d, h, w), labels.dim(), "seg loss shape mismatch");
        let m = (d * h * w) as f64;
        let mut total = 0.0f64;
        {
            // row-wise passes over contiguous channel rows; per-voxel f64
            // accumulation order matches the naive triple loop
            let xs = xv.as_slice().expect("contiguous logits");
            let ls = labels.as_slice().expect("contiguous labels");
            let cstride = d * h * w;
            let mut mx = vec![0.0f32; w];
            let mut lse = vec![0.0f32; w];
            for zy in 0..d * h {
                let row = zy * w;
                mx.copy_from_slice(&xs[row..row + w]);
                for c in 1..c_n {
                    let base = c * cstride + row;
                    for (mv, &v) in mx.iter_mut().zip(&xs[base..base + w]) {
                        *mv = mv.max(v);
                    }
                }
                lse.fill(0.0);
                for c in 0..c_n {
                    let base = c * cstride + row;
                    for (j, s) in lse.iter_mut().enumerate() {
                        *s += (xs[base + j] - mx[j]).exp();
                    }
                }
                for j in 0..w {
                    let v = lse[j].ln() + mx[j];
                    let lab = ls[row + j] as usize;
                    total += (v - xs[lab * cstride + row + j]) as f64;
                }
            }
        }
        let out = ArrayD::from_elem(IxDyn(&[1]), (total / m) as f32);
        self.push(
            out,
            Op::SegCrossEntropy {
                labels: labels.clone(),
            },
            vec![logits],
        )
    }

    /// Mean absolute (or squared) difference of directional edge responses
    /// between a probability map and a fixed one-hot target.
    pub fn edge_loss(&mut self, probs: Var, target: &Array4<f32>, squared: bool) -> Var {
        let pv = self.value4(probs);
        // the gradient falls out of the same sweep as the value; keep it for
        // backward instead of recomputing the Sobel bank there
        let (v, dp) = sobel::edge_loss_fast_with_grad(&pv, target, squared);
        let out = ArrayD::from_elem(IxDyn(&[1]), v);
        self.push(out, Op::EdgeLoss { grad: dp }, vec![probs])
    }

    pub fn bce_with_logits(&mut self, x: Var, indices: Vec<usize>, targets: Vec<f32>) -> Var {
        assert!(!indices.is_empty(), "bce over empty index set");
        assert_eq!(indices.len(), targets.len());
        let xs = self.nodes[x.0].value.as_slice().unwrap();
        let mut total = 0.0f64;
        for (&i, &t) in indices.iter().zip(&targets) {
            let z = xs[i];
            // max(z,0) - z t + ln(1 + e^{-|z|})
            total += (z.max(0.0) - z * t + (-z.abs()).exp().ln_1p()) as f64;
        }
        let out = ArrayD::from_elem(IxDyn(&[1]), (total / indices.len() as f64) as f32);
        self.push(out, Op::BceWithLogits { targets, indices }, vec![x])
    }

    /// Smooth-L1 with transition point 1, averaged over rows x components.
    pub fn smooth_l1(&mut self, x: Var, rows: Vec<usize>, targets: Vec<Vec<f32>>) -> Var {
        assert!(!rows.is_empty(), "smooth_l1 over zero positives");
        assert_eq!(rows.len(), targets.len());
        let xv = self.nodes[x.0]
            .value
            .view()
            .into_dimensionality::<Ix2>()
            .expect("2D smooth_l1 input");
        let comps = xv.ncols();
        let mut total = 0.0f64;
        for (&r, t) in rows.iter().zip(&targets) {
            for c in 0..comps {
                let d = xv[[r, c]] - t[c];
                total += if d.abs() < 1.0 {
                    0.5 * d * d
                } else {
                    d.abs() - 0.5
                } as f64;
            }
        }
        let norm = (rows.len() * comps) as f64;
        let out = ArrayD::from_elem(IxDyn(&[1]), (total / norm) as f32);
        self.push(out, Op::SmoothL1 { targets, rows }, vec![x])
    }

    pub fn weighted_sum(&mut self, parts: &[Var], weights: &[f32]) -> Var {
        assert_eq!(parts.len(), weights.len());
        let total: f32 = parts
            .iter()
            .zip(weights)
            .map(|(v, w)| self.scalar(*v) * w)
            .sum();
        let out = ArrayD::from_elem(IxDyn(&[1]), total);
        self.push(
            out,
            Op::WeightedSum {
                weights: weights.to_vec(),
            },
            parts.to_vec(),
        )
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let total: f32 = self.nodes[x.0].value.sum();
        let out = ArrayD::from_elem(IxDyn(&[1]), total);
        self.push(out, Op::Sum, vec![x])
    }

    pub fn scale(&mut self, x: Var, c: f32) -> Var {
        let out = self.nodes[x.0].value.mapv(|v| v * c);
        self.push(out, Op::Scale { c }, vec![x])
    }

    // -- backward -----------------------------------------------------------

    fn add_grad(&mut self, v: Var, g: ArrayD<f32>) {
        match &mut self.nodes[v.0].grad {
            Some(acc) => *acc += &g,
            slot @ None => *slot = Some(g),
        }
    }

    pub fn backward(&mut self, loss: Var) {
        assert_eq!(self.nodes[loss.0].value.len(), 1, "loss must be scalar");
        self.nodes[loss.0].grad = Some(ArrayD::from_elem(IxDyn(&[1]), 1.0));
        // set CFUN_PROFILE=1 to print per-op backward time
        let profile = std::env::var_os("CFUN_PROFILE").is_some();
        let mut op_times: HashMap<&'static str, f64> = HashMap::new();
        for i in (0..=loss.0).rev() {
            if matches!(self.nodes[i].op, Op::Leaf) {
                continue; // leaf grads stay in place for param_grads()
            }
            // an interior node's grad has no readers after its own step,
            // so move it out instead of cloning
            let Some(gy) = self.nodes[i].grad.take() else {
                continue;
            };
            let t0 = profile.then(std::time::Instant::now);
            let inputs = self.nodes[i].inputs.clone();
            match &self.nodes[i].op {
                Op::Leaf => {}
                Op::Conv3d(spec) => {
                    let spec = *spec;
                    let gy4 = gy.view().into_dimensionality::<Ix4>().unwrap();
                    let x = self.view4(inputs[0]);
                    let w = self.nodes[inputs[1].0].value.view();
                    let kshape = {
                        let s = w.shape();
                        [s[2], s[3], s[4]]
                    };
                    if self.wants_grad(inputs[0]) {
                        let dx = conv3d_bwd_dx(&gy4, &w, spec, x.dim());
                        self.add_grad(inputs[0], dx.into_dyn());
                    }
                    let x = self.view4(inputs[0]);
                    let (dw, db) = conv3d_bwd_dw(&x, &gy4, spec, kshape);
                    self.add_grad(inputs[1], dw);
                    self.add_grad(inputs[2], Array1::from_vec(db).into_dyn());
                }
                Op::Deconv3d(spec) => {
                    let spec = *spec;
                    let gy4 = gy.view().into_dimensionality::<Ix4>().unwrap();
                    let x = self.view4(inputs[0]);
                    let w = self.nodes[inputs[1].0].value.view();
                    let kshape = {
                        let s = w.shape();
                        [s[2], s[3], s[4]]
                    };
                    // forward was conv3d_bwd_dx(x, w), so the adjoints swap:
                    let dx = conv3d_fwd(&gy4, &w, None, spec);
                    let (dw, _) = conv3d_bwd_dw(&gy4, &x, spec, kshape);
                    let db: Vec<f32> = gy4.axis_iter(Axis(0)).map(|ch| ch.sum()).collect();
                    self.add_grad(inputs[0], dx.into_dyn());
                    self.add_grad(inputs[1], dw);
                    self.add_grad(inputs[2], Array1::from_vec(db).into_dyn());
                }
                Op::InstanceNorm { eps } => {
                    let eps = *eps;
                    let gy4 = gy.view().into_dimensionality::<Ix4>().unwrap();
                    let x = self.view4(inputs[0]);
                    let (c_n, d, h, w) = x.dim();
                    let n = (d * h * w) as f32;
                    let g = self.nodes[inputs[1].0].value.as_slice().unwrap().to_vec();
                    let mut dx = Array4::<f32>::zeros((c_n, d, h, w));
                    let mut dscale = Array1::<f32>::zeros(c_n);
                    let mut dshift = Array1::<f32>::zeros(c_n);
                    {
                        let xs = x.as_slice().expect("contiguous input");
                        let gys = gy4.as_slice().expect("contiguous grad");
                        let dxs = dx.as_slice_mut().unwrap();
                        let cs = d * h * w;
                        for c in 0..c_n {
                            let ch = &xs[c * cs..(c + 1) * cs];
                            let dych = &gys[c * cs..(c + 1) * cs];
                            let mean = kernels::sum_rows(ch) / n;
                            let var = kernels::centered_sumsq(ch, mean) / n;
                            let inv = 1.0 / (var + eps).sqrt();
                            let sum_dy = kernels::sum_rows(dych);
                            // sum(dy * xhat) = (dot(dy, x) - mean * sum(dy)) * inv
                            let sum_dy_xhat = (kernels::dot_rows(dych, ch) - mean * sum_dy) * inv;
                            dshift[c] = sum_dy;
                            dscale[c] = sum_dy_xhat;
                            let mdy = sum_dy / n;
                            let mdyx = sum_dy_xhat / n;
                            let ginv = g[c] * inv;
                            for ((o, &dyv), &xv) in
                                dxs[c * cs..(c + 1) * cs].iter_mut().zip(dych).zip(ch)
                            {
                                let xhat = (xv - mean) * inv;
                                *o = ginv * (dyv - mdy - xhat * mdyx);
                            }
                        }
                    }
                    self.add_grad(inputs[0], dx.into_dyn());
                    self.add_grad(inputs[1], dscale.into_dyn());
                    self.add_grad(inputs[2], dshift.into_dyn());
                }
                Op::Relu => {
                    let mut dx = gy;
                    dx.zip_mut_with(&self.nodes[inputs[0].0].value, |g, &v| {
                        if v <= 0.0 {
                            *g = 0.0;
                        }
                    });
                    self.add_grad(inputs[0], dx);
                }
                Op::Add => {
                    self.add_grad(inputs[0], gy.clone());
                    self.add_grad(inputs[1], gy);
                }
                Op::ConcatC => {
                    let gy4 = gy.view().into_dimensionality::<Ix4>().unwrap();
                    let ca = self.nodes[inputs[0].0].value.shape()[0];
                    let ga = gy4.slice(ndarray::s![..ca, .., .., ..]).to_owned();
                    let gb = gy4.slice(ndarray::s![ca.., .., .., ..]).to_owned();
                    self.add_grad(inputs[0], ga.into_dyn());
                    self.add_grad(inputs[1], gb.into_dyn());
                }
                Op::Upsample { .. } => {
                    let gy4 = gy.view().into_dimensionality::<Ix4>().unwrap();
                    let xs = self.view4(inputs[0]).dim();
                    let dx = upsample_trilinear_bwd(&gy4, xs);
                    self.add_grad(inputs[0], dx.into_dyn());
                }
                Op::RoiAlign { bx, spec } => {
                    if self.wants_grad(inputs[0]) {
                        let (bx, spec) = (*bx, *spec);
                        let gy4 = gy.view().into_dimensionality::<Ix4>().unwrap();
                        let xs = self.view4(inputs[0]).dim();
                        let dx = roi_align_bwd(&gy4, &bx, &spec, xs);
                        self.add_grad(inputs[0], dx.into_dyn());
                    }
                }
                Op::SoftmaxC => {
                    let gy4 = gy.view().into_dimensionality::<Ix4>().unwrap();
                    let p = self.view4(Var(i));
                    let (c_n, d, h, w) = p.dim();
                    let mut dx = Array4::<f32>::zeros((c_n, d, h, w));
                    {
                        // row-wise like the forward: contiguous channel rows
                        let gys = gy4.as_slice().expect("contiguous grad");
                        let ps = p.as_slice().expect("contiguous probs");
                        let dxs = dx.as_slice_mut().unwrap();
                        let cstride = d * h * w;
                        let mut dot = vec![0.0f32; w];
                        for zy in 0..d * h {
                            let row = zy * w;
                            dot.fill(0.0);
                            for c in 0..c_n {
                                let base = c * cstride + row;
                                for ((s, &g), &pv) in dot
                                    .iter_mut()
                                    .zip(&gys[base..base + w])
                                    .zip(&ps[base..base + w])
                                {
                                    *s += g * pv;
                                }
                            }
                            for c in 0..c_n {
                                let base = c * cstride + row;
                                for (j, o) in dxs[base..base + w].iter_mut().enumerate() {
                                    *o = ps[base + j] * (gys[base + j] - dot[j]);
                                }
                            }
                        }
                    }
                    self.add_grad(inputs[0], dx.into_dyn());
                }
                Op::Reshape => {
                    let xs = self.nodes[inputs[0].0].value.shape().to_vec();
                    let dx = gy.into_shape_with_order(IxDyn(&xs)).unwrap();
                    self.add_grad(inputs[0], dx);
                }
                Op::Linear => {
                    let gy1 = gy.view().into_dimensionality::<Ix1>().unwrap();
                    let x = self.nodes[inputs[0].0]
                        .value
                        .view()
                        .into_dimensionality::<Ix1>()
                        .unwrap();
                    let w = self.nodes[inputs[1].0]
                        .value
                        .view()
                        .into_dimensionality::<Ix2>()
                        .unwrap();
                    let mut dx = Array1::<f32>::zeros(x.len());
                    let mut dw = ndarray::Array2::<f32>::zeros(w.dim());
                    for (o, (&g, row)) in gy1
                        .iter()
                        .zip(w.outer_iter())
                        .enumerate()
                        .map(|(o, p)| (o, p))
                    {
                        for (j, &xv) in x.iter().enumerate() {
                            dx[j] += g * row[j];
                            dw[[o, j]] = g * xv;
                        }
                    }
                    self.add_grad(inputs[0], dx.into_dyn());
                    self.add_grad(inputs[1], dw.into_dyn());
                    self.add_grad(inputs[2], gy1.to_owned().into_dyn());
                }
                Op::Slice1 { start, len } => {
                    let (start, len) = (*start, *len);
                    let n = self.nodes[inputs[0].0].value.len();
                    let mut dx = Array1::<f32>::zeros(n);
                    let gy1 = gy.view().into_dimensionality::<Ix1>().unwrap();
                    for j in 0..len {
                        dx[start + j] = gy1[j];
                    }
                    self.add_grad(inputs[0], dx.into_dyn());
                }
                Op::AnchorFlatten { comps } => {
                    let comps = *comps;
                    let gy2 = gy.view().into_dimensionality::<Ix2>().unwrap();
                    let xs = self.view4(inputs[0]).dim();
                    let (ac, d, h, w) = xs;
                    let a_n = ac / comps;
                    let mut dx = Array4::<f32>::zeros(xs);
                    let mut row = 0;
                    for z in 0..d {
                        for y in 0..h {
                            for xx in 0..w {
                                for a in 0..a_n {
                                    for cmp in 0..comps {
                                        dx[[a * comps + cmp, z, y, xx]] = gy2[[row, cmp]];
                                    }
                                    row += 1;
                                }
                            }
                        }
                    }
                    self.add_grad(inputs[0], dx.into_dyn());
                }
                Op::ConcatRows => {
                    let gy2 = gy.view().into_dimensionality::<Ix2>().unwrap();
                    let mut offset = 0;
                    let sizes: Vec<usize> = inputs
                        .iter()
                        .map(|v| self.nodes[v.0].value.shape()[0])
                        .collect();
                    for (v, rows) in inputs.iter().zip(sizes) {
                        let part = gy2.slice(ndarray::s![offset..offset + rows, ..]).to_owned();
                        offset += rows;
                        self.add_grad(*v, part.into_dyn());
                    }
                }
                Op::SegCrossEntropy { labels } => {
                    let labels = labels.clone();
                    let g0 = gy[[0]];
                    let x = self.view4(inputs[0]);
                    let (c_n, d, h, w) = x.dim();
                    let m = (d * h * w) as f32;
                    let mut dx = Array4::<f32>::zeros((c_n, d, h, w));
                    {
                        // row-wise softmax with the exponentials staged in dx,
                        // so each exp is computed once
                        let xs = x.as_slice().expect("contiguous logits");
                        let ls = labels.as_slice().expect("contiguous labels");
                        let dxs = dx.as_slice_mut().unwrap();
                        let cstride = d * h * w;
                        let mut mx = vec![0.0f32; w];
                        let mut sum = vec![0.0f32; w];
                        for zy in 0..d * h {
                            let row = zy * w;
                            mx.copy_from_slice(&xs[row..row + w]);
                            for c in 1..c_n {
                                let base = c * cstride + row;
                                for (mv, &v) in mx.iter_mut().zip(&xs[base..base + w]) {
                                    *mv = mv.max(v);
                                }
                            }
                            sum.fill(0.0);
                            for c in 0..c_n {
                                let base = c * cstride + row;
                                for (j, o) in dxs[base..base + w].iter_mut().enumerate() {
                                    let e = (xs[base + j] - mx[j]).exp();
                                    *o = e;
                                    sum[j] += e;
                                }
                            }
                            for c in 0..c_n {
                                let base = c * cstride + row;
                                for (j, o) in dxs[base..base + w].iter_mut().enumerate() {
                                    let t = if ls[row + j] as usize == c { 1.0 } else { 0.0 };
                                    *o = g0 * (*o / sum[j] - t) / m;
                                }
                            }
                        }
                    }
                    self.add_grad(inputs[0], dx.into_dyn());
                }
                Op::EdgeLoss { grad } => {
                    let g0 = gy[[0]];
                    let dp = grad.mapv(|v| v * g0);
                    self.add_grad(inputs[0], dp.into_dyn());
                }
                Op::BceWithLogits { targets, indices } => {
                    let (targets, indices) = (targets.clone(), indices.clone());
                    let g0 = gy[[0]] / indices.len() as f32;
                    let xs = self.nodes[inputs[0].0].value.as_slice().unwrap();
                    let mut dx = ArrayD::<f32>::zeros(self.nodes[inputs[0].0].value.raw_dim());
                    {
                        let dxs = dx.as_slice_mut().unwrap();
                        for (&i2, &t) in indices.iter().zip(&targets) {
                            let z = xs[i2];
                            let sig = 1.0 / (1.0 + (-z).exp());
                            dxs[i2] += g0 * (sig - t);
                        }
                    }
                    self.add_grad(inputs[0], dx);
                }
                Op::SmoothL1 { targets, rows } => {
                    let (targets, rows) = (targets.clone(), rows.clone());
                    let x = self.nodes[inputs[0].0]
                        .value
                        .view()
                        .into_dimensionality::<Ix2>()
                        .unwrap();
                    let comps = x.ncols();
                    let g0 = gy[[0]] / (rows.len() * comps) as f32;
                    let mut dx = ndarray::Array2::<f32>::zeros(x.dim());
                    for (&r, t) in rows.iter().zip(&targets) {
                        for c in 0..comps {
                            let d = x[[r, c]] - t[c];
                            dx[[r, c]] += g0 * d.clamp(-1.0, 1.0);
                        }
                    }
                    self.add_grad(inputs[0], dx.into_dyn());
                }
                Op::WeightedSum { weights } => {
                    let weights = weights.clone();
                    let g0 = gy[[0]];
                    for (v, w) in inputs.iter().zip(weights) {
                        self.add_grad(*v, ArrayD::from_elem(IxDyn(&[1]), g0 * w));
                    }
                }
                Op::Sum => {
                    let g0 = gy[[0]];
                    let xs = self.nodes[inputs[0].0].value.raw_dim();
                    self.add_grad(inputs[0], ArrayD::from_elem(xs, g0));
                }
                Op::Scale { c } => {
                    let c = *c;
                    self.add_grad(inputs[0], gy.mapv(|v| v * c));
                }
            }
            if let Some(t0) = t0 {
                *op_times.entry(self.nodes[i].op.name()).or_default() += t0.elapsed().as_secs_f64();
            }
        }
        if profile {
            let mut rows: Vec<_> = op_times.into_iter().collect();
            rows.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap());
            for (name, secs) in rows {
                eprintln!("bwd {name:<14} {secs:.4}s");
            }
        }
    }

    /// Accumulated parameter gradients by name; zeros for parameters the
    /// loss did not reach.
    pub fn param_grads(&self) -> HashMap<String, ArrayD<f32>> {
        let mut out = HashMap::new();
        for (name, v) in &self.params {
            let g = match &self.nodes[v.0].grad {
                Some(g) => g.clone(),
                None => ArrayD::zeros(self.nodes[v.0].value.raw_dim()),
            };
            *out.entry(name.clone())
                .or_insert_with(|| ArrayD::zeros(g.raw_dim())) += &g;
        }
        out
    }
}
