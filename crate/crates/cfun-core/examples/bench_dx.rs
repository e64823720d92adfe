//! Isolated dx-vs-fwd comparison on identical shapes.
use cfun_core::kernels::{conv3d_bwd_dx, conv3d_fwd, ConvSpec};
use cfun_core::rng::SplitMix64;
use ndarray::{Array4, ArrayD};
use std::time::Instant;

fn main() {
    let mut rng = SplitMix64::new(1);
    let x = Array4::from_shape_fn((4, 64, 64, 64), |_| rng.next_f32());
    let w = ArrayD::from_shape_fn(vec![4, 4, 3, 3, 3], |_| rng.next_f32());
    let spec = ConvSpec {
        stride: [1, 1, 1],
        pad: [1, 1, 1],
    };
    for _ in 0..3 {
        let t = Instant::now();
        for _ in 0..10 {
            std::hint::black_box(conv3d_fwd(&x.view(), &w.view(), None, spec));
        }
        let f = t.elapsed().as_secs_f64() / 10.0;
        let t = Instant::now();
        for _ in 0..10 {
            std::hint::black_box(conv3d_bwd_dx(&x.view(), &w.view(), spec, x.dim()));
        }
        let dx = t.elapsed().as_secs_f64() / 10.0;
        println!("fwd {:6.2}ms  dx {:6.2}ms", f * 1e3, dx * 1e3);
    }
}
