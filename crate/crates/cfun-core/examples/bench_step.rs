//! Rough per-step training cost at desk scale.

use cfun_core::phantom::{load_manifest, make_dataset, PhantomSpec};
use cfun_core::pipeline::{train_variant, TrainConfig, Variant};
use std::time::Instant;

fn main() {
    let dir = std::env::temp_dir().join("cfun_bench");
    let spec = PhantomSpec::with_shape([96, 128, 128]);
    let t0 = Instant::now();
    let manifest = load_manifest(make_dataset(&spec, 2, 1, &dir).unwrap()).unwrap();
    println!("dataset: {:.2}s", t0.elapsed().as_secs_f64());

    let mut cfg = TrainConfig::desk();
    cfg.base_epochs = 3;
    cfg.edge_epochs = 1;
    let t0 = Instant::now();
    let summary = train_variant(&cfg, &manifest, Variant::Full, &dir.join("run")).unwrap();
    let dt = t0.elapsed().as_secs_f64();
    println!(
        "{} steps in {:.2}s -> {:.3}s/step",
        summary.steps,
        dt,
        dt / summary.steps as f64
    );
}
