//! Verification harness: independent brute-force oracles and the
//! finite-difference gradient battery, each reporting a numeric worst-case
//! error. The CLI `verify` subcommand and the acceptance tests both drive
//! these suites, so "the build is numerically sound" is one function call.
//!
//! The oracles here are deliberately naive re-derivations from the
//! definitions (septuple loops, f64 accumulation, full scans) and share no
//! code with the optimized kernels they check.

use crate::boxes::{nms_3d, BBox3D, Proposal};
use crate::graph::Graph;
use crate::kernels::{conv3d_fwd, roi_align_fwd, ConvSpec, RoiAlignSpec};
use crate::layers::{init_p3d, p3d_bottleneck};
use crate::loss::{box_loss, cls_loss, seg_loss};
use crate::params::ParamStore;
use crate::phantom::ground_truth_box;
use crate::rng::SplitMix64;
use crate::sobel::{edge_response, SobelBank};
use crate::unet::{init_unet, unet_forward, UnetConfig};
use crate::volume::{LabelVolume, SegKind, SegMap};
use ndarray::{Array1, Array3, Array4, ArrayD, IxDyn};

/// Outcome of one named check: worst observed error over all instances
/// against the tolerance it must stay under.
#[derive(Debug, Clone)]
pub struct CheckReport {
    pub name: &'static str,
    pub instances: usize,
    pub max_error: f64,
    pub tolerance: f64,
}

impl CheckReport {
    pub fn passed(&self) -> bool {
        self.max_error.is_finite() && self.max_error <= self.tolerance
    }
}

fn rel_err(got: f64, want: f64) -> f64 {
    (got - want).abs() / want.abs().max(1.0)
}

fn rand_vec(rng: &mut SplitMix64, n: usize, lo: f64, hi: f64) -> Vec<f32> {
    (0..n).map(|_| rng.uniform(lo, hi) as f32).collect()
}

fn rand4(rng: &mut SplitMix64, shape: (usize, usize, usize, usize)) -> Array4<f32> {
    Array4::from_shape_fn(shape, |_| rng.uniform(-1.0, 1.0) as f32)
}

// ---------------------------------------------------------------------------
// Oracle suite
// ---------------------------------------------------------------------------

/// Runs every oracle comparison on `instances` random small cases each.
/// `bank` is the Sobel bank under test — pass [`crate::sobel::sobel_bank`]
/// normally, or a perturbed copy to prove the harness catches corruption.
pub fn oracle_suite(seed: u64, instances: usize, bank: &SobelBank) -> Vec<CheckReport> {
    let mut rng = SplitMix64::new(seed);
    vec![
        check_conv3d(&mut rng.fork(), instances),
        check_edge_response(&mut rng.fork(), instances, bank),
        check_seg_loss(&mut rng.fork(), instances),
        check_cls_loss(&mut rng.fork(), instances),
        check_box_loss(&mut rng.fork(), instances),
        check_nms_3d(&mut rng.fork(), instances),
        check_roi_align(&mut rng.fork(), instances),
        check_ground_truth_box(&mut rng.fork(), instances),
    ]
}

fn check_conv3d(rng: &mut SplitMix64, instances: usize) -> CheckReport {
    let mut worst = 0.0f64;
    for _ in 0..instances {
        let (ci, co) = (1 + rng.below(3), 1 + rng.below(3));
        let dims = [2 + rng.below(7), 2 + rng.below(7), 2 + rng.below(7)];
        let k: [usize; 3] = std::array::from_fn(|a| 1 + rng.below(dims[a].min(3)));
        let stride: [usize; 3] = std::array::from_fn(|_| 1 + rng.below(2));
        let pad: [usize; 3] = std::array::from_fn(|a| rng.below(k[a] / 2 + 1));
        let spec = ConvSpec { stride, pad };
        let x = rand4(rng, (ci, dims[0], dims[1], dims[2]));
        let wn = co * ci * k[0] * k[1] * k[2];
        let w = ArrayD::from_shape_vec(
            IxDyn(&[co, ci, k[0], k[1], k[2]]),
            rand_vec(rng, wn, -1.0, 1.0),
        )
        .unwrap();
        let bias = rand_vec(rng, co, -0.5, 0.5);
        let got = conv3d_fwd(&x.view(), &w.view(), Some(&bias), spec);

        // definition: cross-correlation with zero padding, f64 accumulation
        let (od, oh, ow) = (
            spec.out_dim(0, dims[0], k[0]),
            spec.out_dim(1, dims[1], k[1]),
            spec.out_dim(2, dims[2], k[2]),
        );
        for c in 0..co {
            for zo in 0..od {
                for yo in 0..oh {
                    for xo in 0..ow {
                        let mut acc = bias[c] as f64;
                        for i in 0..ci {
                            for fz in 0..k[0] {
                                for fy in 0..k[1] {
                                    for fx in 0..k[2] {
                                        let zi = (zo * stride[0] + fz) as isize - pad[0] as isize;
                                        let yi = (yo * stride[1] + fy) as isize - pad[1] as isize;
                                        let xi = (xo * stride[2] + fx) as isize - pad[2] as isize;
                                        if zi < 0
                                            || yi < 0
                                            || xi < 0
                                            || zi >= dims[0] as isize
                                            || yi >= dims[1] as isize
                                            || xi >= dims[2] as isize
                                        {
                                            continue;
                                        }
                                        acc += w[[c, i, fz, fy, fx]] as f64
                                            * x[[i, zi as usize, yi as usize, xi as usize]] as f64;
                                    }
                                }
                            }
                        }
                        worst = worst.max(rel_err(got[[c, zo, yo, xo]] as f64, acc));
                    }
                }
            }
        }
    }
    CheckReport {
        name: "conv3d",
        instances,
        max_error: worst,
        tolerance: 1e-5,
    }
}

/// The true Sobel constants, restated literally so a corrupted bank cannot
/// also corrupt the reference.
fn reference_sobel_kernels() -> Vec<Array3<f32>> {
    let smooth = [1.0f32, 2.0, 1.0];
    let deriv = [1.0f32, 0.0, -1.0];
    let mut out = Vec::with_capacity(6);
    for axis in 0..3 {
        let k = Array3::from_shape_fn((3, 3, 3), |(z, y, x)| {
            let idx = [z, y, x];
            idx.iter().enumerate().fold(deriv[idx[axis]], |v, (a, &i)| {
                if a == axis {
                    v
                } else {
                    v * smooth[i]
                }
            })
        });
        out.push(k);
    }
    for axis in 0..3 {
        out.push(out[axis].mapv(|v| -v));
    }
    out
}

fn check_edge_response(rng: &mut SplitMix64, instances: usize, bank: &SobelBank) -> CheckReport {
    let reference = reference_sobel_kernels();
    let mut worst = 0.0f64;
    for i in 0..instances {
        let c = 1 + rng.below(2);
        let dims = (2 + rng.below(7), 2 + rng.below(7), 2 + rng.below(7));
        let map = SegMap {
            data: rand4(rng, (c, dims.0, dims.1, dims.2)),
            kind: SegKind::Probabilities,
        };
        let which = i % bank.kernels.len();
        let got = edge_response(&map, &bank.kernels[which]);
        let kref = &reference[which];
        for ch in 0..c {
            for z in 0..dims.0 {
                for y in 0..dims.1 {
                    for x in 0..dims.2 {
                        let mut acc = 0.0f64;
                        for fz in 0..3usize {
                            for fy in 0..3usize {
                                for fx in 0..3usize {
                                    let zi = z as isize + fz as isize - 1;
                                    let yi = y as isize + fy as isize - 1;
                                    let xi = x as isize + fx as isize - 1;
                                    if zi < 0
                                        || yi < 0
                                        || xi < 0
                                        || zi >= dims.0 as isize
                                        || yi >= dims.1 as isize
                                        || xi >= dims.2 as isize
                                    {
                                        continue;
                                    }
                                    acc += kref[[fz, fy, fx]] as f64
                                        * map.data[[ch, zi as usize, yi as usize, xi as usize]]
                                            as f64;
                                }
                            }
                        }
                        worst = worst.max(rel_err(got[[ch, z, y, x]] as f64, acc));
                    }
                }
            }
        }
    }
    CheckReport {
        name: "edge_response",
        instances,
        max_error: worst,
        tolerance: 1e-5,
    }
}

fn check_seg_loss(rng: &mut SplitMix64, instances: usize) -> CheckReport {
    let mut worst = 0.0f64;
    for _ in 0..instances {
        let c = 2 + rng.below(7);
        let dims = (1 + rng.below(6), 1 + rng.below(6), 1 + rng.below(6));
        let data = rand4(rng, (c, dims.0, dims.1, dims.2)).mapv(|v| v * 4.0);
        let labels = Array3::from_shape_fn(dims, |_| rng.below(c) as u8);
        let got = seg_loss(
            &SegMap {
                data: data.clone(),
                kind: SegKind::Logits,
            },
            &LabelVolume {
                data: labels.clone(),
                num_classes: c,
            },
        )
        .unwrap();
        let mut oracle = 0.0f64;
        for z in 0..dims.0 {
            for y in 0..dims.1 {
                for x in 0..dims.2 {
                    let lse = (0..c)
                        .map(|ch| (data[[ch, z, y, x]] as f64).exp())
                        .sum::<f64>()
                        .ln();
                    oracle += lse - data[[labels[[z, y, x]] as usize, z, y, x]] as f64;
                }
            }
        }
        oracle /= (dims.0 * dims.1 * dims.2) as f64;
        worst = worst.max(rel_err(got as f64, oracle));
    }
    CheckReport {
        name: "seg_loss",
        instances,
        max_error: worst,
        tolerance: 1e-6,
    }
}

fn check_cls_loss(rng: &mut SplitMix64, instances: usize) -> CheckReport {
    let mut worst = 0.0f64;
    for _ in 0..instances {
        let n = 1 + rng.below(50);
        let logits = rand_vec(rng, n, -5.0, 5.0);
        let mut targets: Vec<Option<f32>> = (0..n)
            .map(|_| match rng.below(3) {
                0 => Some(1.0),
                1 => Some(0.0),
                _ => None,
            })
            .collect();
        targets[0] = Some(1.0);
        let got = cls_loss(&logits, &targets).unwrap();
        // sigmoid-form binary cross-entropy in f64
        let (mut oracle, mut m) = (0.0f64, 0usize);
        for (&z, t) in logits.iter().zip(&targets) {
            let Some(t) = t else { continue };
            let p = 1.0 / (1.0 + (-(z as f64)).exp());
            oracle -= (*t as f64) * p.ln() + (1.0 - *t as f64) * (1.0 - p).ln();
            m += 1;
        }
        oracle /= m as f64;
        worst = worst.max(rel_err(got as f64, oracle));
    }
    CheckReport {
        name: "cls_loss",
        instances,
        max_error: worst,
        tolerance: 1e-6,
    }
}

fn check_box_loss(rng: &mut SplitMix64, instances: usize) -> CheckReport {
    let mut worst = 0.0f64;
    for _ in 0..instances {
        let n = 1 + rng.below(50);
        let pred: Vec<[f32; 6]> = (0..n)
            .map(|_| std::array::from_fn(|_| rng.uniform(-3.0, 3.0) as f32))
            .collect();
        let target: Vec<[f32; 6]> = (0..n)
            .map(|_| std::array::from_fn(|_| rng.uniform(-3.0, 3.0) as f32))
            .collect();
        let mut positive: Vec<bool> = (0..n).map(|_| rng.below(2) == 1).collect();
        positive[0] = true;
        let got = box_loss(&pred, &target, &positive).unwrap();
        let (mut oracle, mut m) = (0.0f64, 0usize);
        for i in 0..n {
            if !positive[i] {
                continue;
            }
            m += 1;
            for c in 0..6 {
                let d = (pred[i][c] - target[i][c]) as f64;
                oracle += if d.abs() < 1.0 {
                    0.5 * d * d
                } else {
                    d.abs() - 0.5
                };
            }
        }
        oracle /= (6 * m) as f64;
        worst = worst.max(rel_err(got as f64, oracle));
    }
    CheckReport {
        name: "box_loss",
        instances,
        max_error: worst,
        tolerance: 1e-6,
    }
}

fn check_nms_3d(rng: &mut SplitMix64, instances: usize) -> CheckReport {
    let mut worst = 0.0f64;
    for _ in 0..instances {
        let n = 1 + rng.below(50);
        let proposals: Vec<Proposal> = (0..n)
            .map(|_| {
                let p: [f32; 3] = std::array::from_fn(|_| rng.uniform(0.0, 12.0) as f32);
                let s: [f32; 3] = std::array::from_fn(|_| rng.uniform(1.0, 6.0) as f32);
                Proposal {
                    bbox: BBox3D::new(p[0], p[1], p[2], p[0] + s[0], p[1] + s[1], p[2] + s[2])
                        .unwrap(),
                    score: rng.uniform(0.0, 1.0) as f32,
                }
            })
            .collect();
        let thresh = rng.uniform(0.1, 0.9) as f32;
        let got = nms_3d(&proposals, thresh);

        // independent greedy selection straight from the definition
        let mut alive: Vec<usize> = (0..n).collect();
        let mut want: Vec<usize> = Vec::new();
        while !alive.is_empty() {
            let best = *alive
                .iter()
                .max_by(|&&a, &&b| {
                    proposals[a]
                        .score
                        .partial_cmp(&proposals[b].score)
                        .unwrap()
                        .then(b.cmp(&a)) // prefer the lower index on ties
                })
                .unwrap();
            want.push(best);
            alive.retain(|&i| {
                i != best && naive_iou(&proposals[i].bbox, &proposals[best].bbox) <= thresh
            });
        }
        let matches = got.len() == want.len()
            && got
                .iter()
                .zip(&want)
                .all(|(g, &i)| g.bbox.as_array() == proposals[i].bbox.as_array());
        if !matches {
            worst = 1.0;
        }
    }
    CheckReport {
        name: "nms_3d",
        instances,
        max_error: worst,
        tolerance: 1e-9,
    }
}

fn naive_iou(a: &BBox3D, b: &BBox3D) -> f32 {
    let (aa, ba) = (a.as_array(), b.as_array());
    let mut inter = 1.0f64;
    for axis in 0..3 {
        let lo = aa[axis].max(ba[axis]) as f64;
        let hi = aa[axis + 3].min(ba[axis + 3]) as f64;
        inter *= (hi - lo).max(0.0);
    }
    let va = (0..3).map(|i| (aa[i + 3] - aa[i]) as f64).product::<f64>();
    let vb = (0..3).map(|i| (ba[i + 3] - ba[i]) as f64).product::<f64>();
    (inter / (va + vb - inter)) as f32
}

fn check_roi_align(rng: &mut SplitMix64, instances: usize) -> CheckReport {
    let mut worst = 0.0f64;
    for _ in 0..instances {
        let c = 1 + rng.below(2);
        let dims = [4 + rng.below(5), 4 + rng.below(5), 4 + rng.below(5)];
        let src = rand4(rng, (c, dims[0], dims[1], dims[2]));
        let out: [usize; 3] = std::array::from_fn(|a| 1 + rng.below(dims[a].min(4)));
        let start: [usize; 3] = std::array::from_fn(|a| rng.below(dims[a] - out[a] + 1));
        let bx = BBox3D::new(
            start[0] as f32,
            start[1] as f32,
            start[2] as f32,
            (start[0] + out[0]) as f32,
            (start[1] + out[1]) as f32,
            (start[2] + out[2]) as f32,
        )
        .unwrap();
        let spec = RoiAlignSpec {
            out_size: out,
            samples_per_bin: 1,
        };
        let got = roi_align_fwd(&src.view(), &bx, &spec);
        for ch in 0..c {
            for z in 0..out[0] {
                for y in 0..out[1] {
                    for x in 0..out[2] {
                        let want = src[[ch, start[0] + z, start[1] + y, start[2] + x]];
                        worst = worst.max(rel_err(got[[ch, z, y, x]] as f64, want as f64));
                    }
                }
            }
        }
    }
    CheckReport {
        name: "roi_align",
        instances,
        max_error: worst,
        tolerance: 1e-5,
    }
}

fn check_ground_truth_box(rng: &mut SplitMix64, instances: usize) -> CheckReport {
    let mut worst = 0.0f64;
    for _ in 0..instances {
        let dims = (2 + rng.below(7), 2 + rng.below(7), 2 + rng.below(7));
        let mut data = Array3::<u8>::zeros(dims);
        let fills = 1 + rng.below(6);
        for _ in 0..fills {
            data[[rng.below(dims.0), rng.below(dims.1), rng.below(dims.2)]] =
                1 + rng.below(7) as u8;
        }
        let got = ground_truth_box(&LabelVolume {
            data: data.clone(),
            num_classes: 8,
        })
        .unwrap()
        .as_array();
        // full scan over every voxel coordinate
        let mut lo = [f32::INFINITY; 3];
        let mut hi = [f32::NEG_INFINITY; 3];
        for ((z, y, x), &v) in data.indexed_iter() {
            if v == 0 {
                continue;
            }
            let p = [z as f32, y as f32, x as f32];
            for a in 0..3 {
                lo[a] = lo[a].min(p[a]);
                hi[a] = hi[a].max(p[a] + 1.0);
            }
        }
        for a in 0..3 {
            worst = worst.max(rel_err(got[a] as f64, lo[a] as f64));
            worst = worst.max(rel_err(got[a + 3] as f64, hi[a] as f64));
        }
    }
    CheckReport {
        name: "ground_truth_box",
        instances,
        max_error: worst,
        tolerance: 1e-9,
    }
}

// ---------------------------------------------------------------------------
// Gradient battery
// ---------------------------------------------------------------------------

/// Finite-difference battery over the differentiable building blocks, on
/// small (≤ 8³ spatial, 16³ for the U-net composition) inputs.
pub fn gradient_suite(seed: u64) -> Vec<CheckReport> {
    let mut rng = SplitMix64::new(seed);
    vec![
        grad_conv3d(&mut rng.fork()),
        grad_deconv3d(&mut rng.fork()),
        grad_p3d(&mut rng.fork()),
        grad_roi_align(&mut rng.fork()),
        grad_unet_seg(&mut rng.fork()),
        grad_softmax_edge(&mut rng.fork()),
    ]
}

/// Worst grad_check error over every leaf of a rebuildable scalar graph.
fn check_leaves(
    build: &dyn Fn(&mut Graph, &[crate::graph::Var]) -> crate::graph::Var,
    shapes: &[&[usize]],
    rng: &mut SplitMix64,
    eps: f32,
) -> f64 {
    let leaves: Vec<ArrayD<f32>> = shapes
        .iter()
        .map(|s| {
            let n: usize = s.iter().product();
            ArrayD::from_shape_vec(IxDyn(s), rand_vec(rng, n, -1.0, 1.0)).unwrap()
        })
        .collect();
    let run = |vals: &[ArrayD<f32>]| -> f32 {
        let mut g = Graph::new();
        let vars: Vec<_> = vals.iter().map(|v| g.input(v.clone())).collect();
        let out = build(&mut g, &vars);
        g.scalar(out)
    };
    let mut g = Graph::new();
    let vars: Vec<_> = leaves.iter().map(|v| g.input(v.clone())).collect();
    let out = build(&mut g, &vars);
    g.backward(out);
    let mut worst = 0.0f64;
    for (which, leaf) in leaves.iter().enumerate() {
        let analytic = g.grad(vars[which]).expect("leaf gradient").clone();
        let err = crate::gradcheck::grad_check(
            &|probe: &ArrayD<f32>| {
                let mut vals = leaves.clone();
                vals[which] = probe.clone();
                run(&vals)
            },
            leaf,
            &analytic,
            eps,
            24,
            rng,
        );
        worst = worst.max(err as f64);
    }
    worst
}

fn grad_conv3d(rng: &mut SplitMix64) -> CheckReport {
    let spec = ConvSpec::same3([1, 1, 1]);
    let err = check_leaves(
        &|g, v| {
            let y = g.conv3d(v[0], v[1], v[2], spec);
            g.sum(y)
        },
        &[&[2, 5, 6, 5], &[3, 2, 3, 3, 3], &[3]],
        rng,
        1e-3,
    );
    CheckReport {
        name: "grad_conv3d",
        instances: 3,
        max_error: err,
        tolerance: 1e-2,
    }
}

fn grad_deconv3d(rng: &mut SplitMix64) -> CheckReport {
    let spec = ConvSpec {
        stride: [2, 2, 2],
        pad: [0, 0, 0],
    };
    let err = check_leaves(
        &|g, v| {
            let y = g.deconv3d(v[0], v[1], v[2], spec);
            g.sum(y)
        },
        &[&[3, 4, 4, 4], &[3, 2, 2, 2, 2], &[2]],
        rng,
        // the summed output is linear in every leaf, so a larger step only
        // reduces f32 cancellation noise
        1e-2,
    );
    CheckReport {
        name: "grad_deconv3d",
        instances: 3,
        max_error: err,
        tolerance: 1e-2,
    }
}

fn grad_p3d(rng: &mut SplitMix64) -> CheckReport {
    let mut store = ParamStore::new();
    let mut srng = SplitMix64::new(77);
    init_p3d(&mut store, &mut srng, "blk", 2, 4, 2);
    let xv = rand4(rng, (2, 6, 6, 6));
    let forward = |input: &Array4<f32>| -> (Graph, crate::graph::Var, crate::graph::Var) {
        let mut g = Graph::new();
        let x = g.input4(input.clone());
        let y = p3d_bottleneck(&mut g, &store, "blk", x, 2, 4, 2);
        let l = g.sum(y);
        (g, x, l)
    };
    let (mut g, x, l) = forward(&xv);
    g.backward(l);
    let analytic = g.grad(x).unwrap().clone();
    let err = crate::gradcheck::grad_check(
        &|probe| {
            let p4 = probe.clone().into_dimensionality::<ndarray::Ix4>().unwrap();
            let (g2, _, l2) = forward(&p4);
            g2.scalar(l2)
        },
        &xv.into_dyn(),
        &analytic,
        1e-2,
        32,
        rng,
    );
    CheckReport {
        name: "grad_p3d_bottleneck",
        instances: 1,
        max_error: err as f64,
        tolerance: 1e-2,
    }
}

fn grad_roi_align(rng: &mut SplitMix64) -> CheckReport {
    let bx = BBox3D::new(1.3, 0.6, 2.1, 6.7, 7.2, 6.9).unwrap();
    let spec = RoiAlignSpec::cube(4);
    let err = check_leaves(
        &|g, v| {
            let y = g.roi_align(v[0], bx, spec);
            g.sum(y)
        },
        &[&[2, 8, 8, 8]],
        rng,
        1e-3,
    );
    CheckReport {
        name: "grad_roi_align",
        instances: 1,
        max_error: err,
        tolerance: 1e-2,
    }
}

fn grad_unet_seg(rng: &mut SplitMix64) -> CheckReport {
    let cfg = UnetConfig {
        in_channels: 1,
        base_channels: 4,
        depth: 2,
        num_classes: 8,
    };
    let mut store = ParamStore::new();
    let mut srng = SplitMix64::new(78);
    init_unet(&mut store, &mut srng, &cfg);
    let xv = rand4(rng, (1, 8, 8, 8));
    let labels = Array3::from_shape_fn((16, 16, 16), |_| rng.below(8) as u8);
    let forward = |input: &Array4<f32>| -> (Graph, crate::graph::Var, crate::graph::Var) {
        let mut g = Graph::new();
        let x = g.input4(input.clone());
        let y = unet_forward(&mut g, &store, &cfg, x).unwrap();
        let l = g.seg_cross_entropy(y, &labels);
        (g, x, l)
    };
    let (mut g, x, l) = forward(&xv);
    g.backward(l);
    let analytic = g.grad(x).unwrap().clone();
    let err = crate::gradcheck::grad_check(
        &|probe| {
            let p4 = probe.clone().into_dimensionality::<ndarray::Ix4>().unwrap();
            let (g2, _, l2) = forward(&p4);
            g2.scalar(l2)
        },
        &xv.into_dyn(),
        &analytic,
        // strong curvature through the normalization layers: small FD step
        3e-4,
        24,
        rng,
    );
    CheckReport {
        name: "grad_unet_seg_loss",
        instances: 1,
        max_error: err as f64,
        tolerance: 1e-2,
    }
}

fn grad_softmax_edge(rng: &mut SplitMix64) -> CheckReport {
    let mut target = Array4::<f32>::zeros((3, 6, 6, 6));
    for z in 0..6 {
        for y in 0..6 {
            for x in 0..6 {
                let c = rng.below(3);
                target[[c, z, y, x]] = 1.0;
            }
        }
    }
    let err = check_leaves(
        &|g, v| {
            let p = g.softmax_channels(v[0]);
            g.edge_loss(p, &target, false)
        },
        &[&[3, 6, 6, 6]],
        rng,
        1e-3,
    );
    CheckReport {
        name: "grad_softmax_edge_loss",
        instances: 1,
        max_error: err,
        tolerance: 1e-2,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sobel::sobel_bank;

    #[test]
    fn oracle_suite_passes_on_fresh_build() {
        for r in oracle_suite(1, 10, &sobel_bank()) {
            assert!(r.passed(), "{} max_error {}", r.name, r.max_error);
        }
    }

    #[test]
    fn corrupted_sobel_bank_fails_edge_response_only() {
        let mut bank = sobel_bank();
        bank.kernels[0][[0, 1, 1]] += 0.5;
        let reports = oracle_suite(1, 10, &bank);
        for r in &reports {
            if r.name == "edge_response" {
                assert!(!r.passed(), "corruption went unnoticed");
            } else {
                assert!(r.passed(), "{} unexpectedly failed", r.name);
            }
        }
    }

    #[test]
    fn gradient_suite_passes() {
        for r in gradient_suite(2) {
            assert!(r.passed(), "{} max_error {}", r.name, r.max_error);
        }
    }
}
