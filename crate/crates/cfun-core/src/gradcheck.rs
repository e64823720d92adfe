//! Central-finite-difference verification of analytic gradients.
//!
//! `grad_check` compares an analytic gradient against central differences of
//! a scalar-valued closure at randomly sampled coordinates and reports
//! max |analytic - central| / max(1, |central|). Every op in `graph` is
//! exercised here on small random inputs; the acceptance battery reuses the
//! same harness at the composed-model level.

use crate::rng::SplitMix64;
use ndarray::ArrayD;

/// Maximum relative error between `analytic` and central differences of
/// `value_fn` around `x`, over up to `max_samples` sampled coordinates
/// (all coordinates when the tensor is small enough).
///
/// Panics on non-finite analytic gradients — those are never acceptable.
pub fn grad_check(
    value_fn: &dyn Fn(&ArrayD<f32>) -> f32,
    x: &ArrayD<f32>,
    analytic: &ArrayD<f32>,
    eps: f32,
    max_samples: usize,
    rng: &mut SplitMix64,
) -> f32 {
    assert_eq!(x.shape(), analytic.shape(), "gradient shape mismatch");
    assert!(
        analytic.iter().all(|v| v.is_finite()),
        "non-finite analytic gradient"
    );
    let n = x.len();
    let coords: Vec<usize> = if n <= max_samples {
        (0..n).collect()
    } else {
        (0..max_samples).map(|_| rng.below(n)).collect()
    };
    let xs = x.as_slice().expect("contiguous input");
    let gs = analytic.as_slice().expect("contiguous gradient");
    let mut worst = 0.0f32;
    let mut probe = x.clone();
    for &i in &coords {
        let ps = probe.as_slice_mut().unwrap();
        ps[i] = xs[i] + eps;
        let fp = value_fn(&probe);
        let ps = probe.as_slice_mut().unwrap();
        ps[i] = xs[i] - eps;
        let fm = value_fn(&probe);
        let ps = probe.as_slice_mut().unwrap();
        ps[i] = xs[i];
        let fd = (fp - fm) / (2.0 * eps);
        let err = (gs[i] - fd).abs() / fd.abs().max(1.0);
        worst = worst.max(err);
    }
    worst
}
