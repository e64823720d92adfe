//! Microbenchmark of the three conv kernels on the dominant shapes.
use cfun_core::kernels::{conv3d_bwd_dw, conv3d_bwd_dx, conv3d_fwd, ConvSpec};
use cfun_core::rng::SplitMix64;
use ndarray::{Array4, ArrayD};
use std::time::Instant;

fn bench(label: &str, ci: usize, co: usize, dim: usize, k: [usize; 3], reps: usize) {
    let mut rng = SplitMix64::new(1);
    let x = Array4::from_shape_fn((ci, dim, dim, dim), |_| rng.next_f32());
    let w = ArrayD::from_shape_fn(vec![co, ci, k[0], k[1], k[2]], |_| rng.next_f32());
    let spec = ConvSpec {
        stride: [1, 1, 1],
        pad: [k[0] / 2, k[1] / 2, k[2] / 2],
    };
    let y = conv3d_fwd(&x.view(), &w.view(), None, spec);
    let t = Instant::now();
    for _ in 0..reps {
        std::hint::black_box(conv3d_fwd(&x.view(), &w.view(), None, spec));
    }
    let f = t.elapsed().as_secs_f64() / reps as f64;
    let t = Instant::now();
    for _ in 0..reps {
        std::hint::black_box(conv3d_bwd_dx(&y.view(), &w.view(), spec, x.dim()));
    }
    let dx = t.elapsed().as_secs_f64() / reps as f64;
    let t = Instant::now();
    for _ in 0..reps {
        std::hint::black_box(conv3d_bwd_dw(&x.view(), &y.view(), spec, k));
    }
    let dw = t.elapsed().as_secs_f64() / reps as f64;
    let flops = 2.0 * (co * ci * k[0] * k[1] * k[2] * dim * dim * dim) as f64;
    println!(
        "{label:<22} fwd {:6.2}ms ({:5.1} GF/s)  dx {:6.2}ms  dw {:6.2}ms",
        f * 1e3,
        flops / f / 1e9,
        dx * 1e3,
        dw * 1e3
    );
}

fn main() {
    bench("smooth 4->4 64^3 3^3", 4, 4, 64, [3, 3, 3], 10);
    bench("s0a 8->8 32^3 1x3x3", 8, 8, 32, [1, 3, 3], 20);
    bench("fpn 8->8 32^3 3^3", 8, 8, 32, [3, 3, 3], 10);
    bench("merge 16->8 32^3 1^3", 16, 8, 32, [1, 1, 1], 20);
}
