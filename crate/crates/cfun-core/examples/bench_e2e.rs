//! One full desk-scale run: 20 training + 6 held-out phantoms, full
//! training schedule, then held-out metrics.

use cfun_core::phantom::{load_manifest, make_dataset, PhantomSpec};
use cfun_core::pipeline::{evaluate, load_checkpoint, train, TrainConfig};
use std::time::Instant;

fn main() {
    let seed: u64 = std::env::args()
        .nth(1)
        .and_then(|s| s.parse().ok())
        .unwrap_or(1);
    let dir = std::env::temp_dir().join(format!("cfun_e2e_{seed}"));
    let spec = PhantomSpec::with_shape([96, 128, 128]);
    let t0 = Instant::now();
    let train_m = load_manifest(make_dataset(&spec, 20, 100, dir.join("train")).unwrap()).unwrap();
    let eval_m = load_manifest(make_dataset(&spec, 6, 900, dir.join("eval")).unwrap()).unwrap();
    println!("datasets: {:.1}s", t0.elapsed().as_secs_f64());

    let mut cfg = TrainConfig::desk();
    cfg.seed = seed;
    let t0 = Instant::now();
    let summary = train(&cfg, &train_m, &dir.join("run")).unwrap();
    let train_s = t0.elapsed().as_secs_f64();
    println!(
        "train: {} steps in {:.1}s ({:.3}s/step), final epoch mean loss {:.4}",
        summary.steps,
        train_s,
        train_s / summary.steps as f64,
        summary.final_epoch_mean_total
    );

    let t0 = Instant::now();
    let (store, meta) = load_checkpoint(&summary.checkpoint_dir).unwrap();
    let report = evaluate(&store, &meta, &eval_m).unwrap();
    println!("eval: {:.1}s", t0.elapsed().as_secs_f64());
    let hit = report.per_sample_iou.iter().filter(|&&v| v >= 0.5).count();
    println!(
        "mean_dice {:.4}  mean_iou {:.4}  iou>=0.5 {}/{}  per_sample_iou {:?}",
        report.mean_dice,
        report.mean_iou,
        hit,
        report.per_sample_iou.len(),
        report.per_sample_iou
    );
    println!("per_class {:?}", report.per_class);
}
