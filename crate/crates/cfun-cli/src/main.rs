//! `cfun`: command-line driver for the two-stage heart segmentation
//! pipeline — phantom dataset generation, training, inference, evaluation,
//! the ablation matrix, and numeric verification.
//!
//! Exit codes are a stable contract for CI: 0 success, 1 runtime or
//! numeric failure, 2 usage error.

use clap::{Parser, Subcommand, ValueEnum};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use cfun_core::phantom::{load_manifest, make_dataset, Manifest, PhantomSpec};
use cfun_core::pipeline::{
    ablate, evaluate, infer, load_checkpoint, train, TrainConfig, Variant,
};
use cfun_core::sobel::sobel_bank;
use cfun_core::verify::{gradient_suite, oracle_suite, CheckReport};
use cfun_core::volume::{load_volume, save_labels};

#[derive(Parser)]
#[command(name = "cfun", version, about = "Two-stage whole-heart segmentation pipeline")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Clone, Copy, ValueEnum)]
enum Preset {
    Desk,
    Paper,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic phantom dataset with a manifest.
    Gen {
        /// Number of phantoms to emit.
        #[arg(long, default_value_t = 20)]
        count: usize,
        /// Volume dimensions as DxHxW, each at least 16.
        #[arg(long, default_value = "96x128x128")]
        shape: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Output directory; the manifest path is printed on success.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train on a manifest and write a checkpoint plus a loss CSV.
    Train {
        /// JSON config with a flat key set mirroring the training config;
        /// overrides the preset, and flags override both.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = Preset::Desk)]
        preset: Preset,
        /// Dataset manifest path.
        #[arg(long)]
        data: PathBuf,
        /// Checkpoint output directory.
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        lr: Option<f32>,
    },
    /// Segment one volume with a trained checkpoint.
    Infer {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Input volume file.
        #[arg(long)]
        input: PathBuf,
        /// Where to write the predicted label volume.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on a manifest and print the metrics table.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
    },
    /// Train one ablation variant and evaluate it.
    Ablate {
        /// One of: full, no_edge, no_refine, input_IO, input_IC, input_IP.
        #[arg(long)]
        variant: String,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = Preset::Desk)]
        preset: Preset,
        #[arg(long)]
        train_data: PathBuf,
        #[arg(long)]
        eval_data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Run the oracle comparisons and the gradient battery.
    Verify {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Random instances per oracle check.
        #[arg(long, default_value_t = 100)]
        instances: usize,
        /// Test hook: perturb one Sobel constant to prove the harness
        /// catches it.
        #[arg(long, hide = true)]
        corrupt_sobel: bool,
    },
}

/// Failures carry their exit code: usage problems are 2, everything that
/// went wrong at runtime is 1.
enum Failure {
    Usage(String),
    Runtime(String),
}

fn usage(msg: impl Into<String>) -> Failure {
    Failure::Usage(msg.into())
}

fn runtime(err: impl std::fmt::Display) -> Failure {
    Failure::Runtime(err.to_string())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}

fn run(cmd: Cmd) -> Result<(), Failure> {
    match cmd {
        Cmd::Gen {
            count,
            shape,
            seed,
            out,
        } => cmd_gen(count, &shape, seed, &out),
        Cmd::Train {
            config,
            preset,
            data,
            out,
            seed,
            lr,
        } => {
            let cfg = resolve_config(preset, config.as_deref(), seed, lr)?;
            cmd_train(&cfg, &data, &out)
        }
        Cmd::Infer {
            checkpoint,
            input,
            out,
        } => cmd_infer(&checkpoint, &input, out.as_deref()),
        Cmd::Eval { checkpoint, data } => cmd_eval(&checkpoint, &data),
        Cmd::Ablate {
            variant,
            config,
            preset,
            train_data,
            eval_data,
            out,
            seed,
        } => {
            let variant: Variant = variant.parse().map_err(|e| usage(format!("{e}")))?;
            let cfg = resolve_config(preset, config.as_deref(), seed, None)?;
            cmd_ablate(variant, &cfg, &train_data, &eval_data, &out)
        }
        Cmd::Verify {
            seed,
            instances,
            corrupt_sobel,
        } => cmd_verify(seed, instances, corrupt_sobel),
    }
}

// ---------------------------------------------------------------------------
// gen
// ---------------------------------------------------------------------------

fn cmd_gen(count: usize, shape: &str, seed: u64, out: &Path) -> Result<(), Failure> {
    let dims = parse_shape(shape)?;
    if count == 0 {
        return Err(usage("--count must be at least 1"));
    }
    let spec = PhantomSpec::with_shape(dims);
    // dimension constraints are usage errors, not runtime ones
    spec.validate().map_err(|e| usage(e.to_string()))?;
    let manifest = make_dataset(&spec, count, seed, out).map_err(runtime)?;
    println!("{}", manifest.display());
    Ok(())
}

fn parse_shape(s: &str) -> Result<[usize; 3], Failure> {
    let parts: Vec<&str> = s.split('x').collect();
    let err = || usage(format!("--shape must be DxHxW (e.g. 96x128x128), got {s:?}"));
    if parts.len() != 3 {
        return Err(err());
    }
    let mut dims = [0usize; 3];
    for (d, p) in dims.iter_mut().zip(&parts) {
        *d = p.parse().map_err(|_| err())?;
    }
    Ok(dims)
}

// ---------------------------------------------------------------------------
// config resolution
// ---------------------------------------------------------------------------

fn resolve_config(
    preset: Preset,
    file: Option<&Path>,
    seed: Option<u64>,
    lr: Option<f32>,
) -> Result<TrainConfig, Failure> {
    let mut cfg = match preset {
        Preset::Desk => TrainConfig::desk(),
        Preset::Paper => TrainConfig::paper(),
    };
    if let Some(path) = file {
        apply_config_file(&mut cfg, path)?;
    }
    if let Some(s) = seed {
        cfg.seed = s;
    }
    if let Some(l) = lr {
        cfg.lr = l;
    }
    cfg.validate().map_err(|e| usage(e.to_string()))?;
    Ok(cfg)
}

/// Overlays the file's top-level keys onto the preset: a config only needs
/// the keys it wants to change.
fn apply_config_file(cfg: &mut TrainConfig, path: &Path) -> Result<(), Failure> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| usage(format!("cannot read config {}: {e}", path.display())))?;
    let overlay: serde_json::Map<String, serde_json::Value> = serde_json::from_str(&text)
        .map_err(|e| usage(format!("config {} is not a JSON object: {e}", path.display())))?;
    let mut base = serde_json::to_value(&*cfg).expect("config serializes");
    let slots = base.as_object_mut().expect("config is an object");
    for (key, value) in overlay {
        match slots.get_mut(&key) {
            Some(slot) => *slot = value,
            None => return Err(usage(format!("unknown config key {key:?}"))),
        }
    }
    *cfg = serde_json::from_value(base)
        .map_err(|e| usage(format!("invalid config value: {e}")))?;
    Ok(())
}

fn read_manifest(path: &Path) -> Result<Manifest, Failure> {
    if !path.exists() {
        return Err(usage(format!("manifest {} does not exist", path.display())));
    }
    load_manifest(path).map_err(runtime)
}

// ---------------------------------------------------------------------------
// train / infer / eval / ablate
// ---------------------------------------------------------------------------

fn cmd_train(cfg: &TrainConfig, data: &Path, out: &Path) -> Result<(), Failure> {
    let manifest = read_manifest(data)?;
    let summary = train(cfg, &manifest, out).map_err(runtime)?;
    println!(
        "trained {} steps; final epoch mean loss {:.4}",
        summary.steps, summary.final_epoch_mean_total
    );
    println!("loss csv: {}", summary.loss_csv.display());
    println!("checkpoint: {}", summary.checkpoint_dir.display());
    Ok(())
}

fn cmd_infer(checkpoint: &Path, input: &Path, out: Option<&Path>) -> Result<(), Failure> {
    if !checkpoint.exists() {
        return Err(usage(format!(
            "checkpoint {} does not exist",
            checkpoint.display()
        )));
    }
    let (store, meta) = load_checkpoint(checkpoint).map_err(runtime)?;
    let vol = load_volume(input).map_err(runtime)?;
    let result = infer(&store, &meta, &vol).map_err(runtime)?;
    let b = result.proposal.bbox.as_array();
    println!(
        "box z:{:.1}..{:.1} y:{:.1}..{:.1} x:{:.1}..{:.1} score {:.3}{}",
        b[0],
        b[3],
        b[1],
        b[4],
        b[2],
        b[5],
        result.proposal.score,
        if result.low_confidence {
            " (low confidence)"
        } else {
            ""
        }
    );
    println!("dotted_box_seconds={}", result.dotted_box_seconds);
    if let Some(path) = out {
        save_labels(&result.labels, path).map_err(runtime)?;
        println!("labels: {}", path.display());
    }
    Ok(())
}

fn cmd_eval(checkpoint: &Path, data: &Path) -> Result<(), Failure> {
    if !checkpoint.exists() {
        return Err(usage(format!(
            "checkpoint {} does not exist",
            checkpoint.display()
        )));
    }
    let manifest = read_manifest(data)?;
    let (store, meta) = load_checkpoint(checkpoint).map_err(runtime)?;
    let report = evaluate(&store, &meta, &manifest).map_err(runtime)?;
    print!("{}", report.table());
    println!(
        "mean_iou {:.4}  mean_seconds {:.3}",
        report.mean_iou, report.mean_seconds
    );
    Ok(())
}

fn cmd_ablate(
    variant: Variant,
    cfg: &TrainConfig,
    train_data: &Path,
    eval_data: &Path,
    out: &Path,
) -> Result<(), Failure> {
    let train_m = read_manifest(train_data)?;
    let eval_m = read_manifest(eval_data)?;
    let (summary, report) = ablate(variant, cfg, &train_m, &eval_m, out).map_err(runtime)?;
    println!(
        "variant {variant}: {} steps, final epoch mean loss {:.4}",
        summary.steps, summary.final_epoch_mean_total
    );
    print!("{}", report.table());
    Ok(())
}

// ---------------------------------------------------------------------------
// verify
// ---------------------------------------------------------------------------

fn cmd_verify(seed: u64, instances: usize, corrupt_sobel: bool) -> Result<(), Failure> {
    if instances == 0 {
        return Err(usage("--instances must be at least 1"));
    }
    let mut bank = sobel_bank();
    if corrupt_sobel {
        bank.kernels[0][[0, 1, 1]] += 0.5;
    }
    let mut reports = oracle_suite(seed, instances, &bank);
    reports.extend(gradient_suite(seed));
    let mut failed: Vec<&str> = Vec::new();
    for r in &reports {
        print_report(r);
        if !r.passed() {
            failed.push(r.name);
        }
    }
    if failed.is_empty() {
        println!("all {} checks passed", reports.len());
        Ok(())
    } else {
        Err(runtime(format!("checks failed: {}", failed.join(", "))))
    }
}

fn print_report(r: &CheckReport) {
    println!(
        "{:<18} instances {:>3}  max_rel_error {:10.3e}  tolerance {:7.0e}  {}",
        r.name,
        r.instances,
        r.max_error,
        r.tolerance,
        if r.passed() { "ok" } else { "FAIL" }
    );
}
