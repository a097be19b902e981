//! Generates a small synthetic corpus and trains both cascade stages on it.
//!
//! ```text
//! cargo run --release --example train_cascade -- [out_dir] [epochs]
//! ```
//! The trained stages land in `out_dir/cascade/`, ready for the `classify`,
//! `evaluate_report` and `bench_throughput` examples.

use std::time::Instant;

use levitmc::cascade::{CascadeModel, STAGE1_FILE, STAGE2_FILE};
use levitmc::data::{split, synth_generate, Split, SynthSpec, MANIFEST_FILE};
use levitmc::densenet::{build_densenet, DenseNetConfig};
use levitmc::eval::evaluate;
use levitmc::levit::{build_levit, LeViTConfig};
use levitmc::train::{train_model, Stage, TrainConfig, TrainData};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let mut args = std::env::args().skip(1);
    let out = args.next().unwrap_or_else(|| "target/synth-demo".into());
    let epochs: usize = args.next().map(|e| e.parse()).transpose()?.unwrap_or(20);

    let spec = SynthSpec {
        samples_per_family: 64,
        benign_samples: 64,
        ..SynthSpec::default()
    };
    let manifest = split(&synth_generate(&spec, &out)?, 0.7, spec.seed)?;
    manifest.save(std::path::Path::new(&out).join(MANIFEST_FILE))?;
    let classes = manifest.class_index.clone();
    let data = TrainData::load(&manifest)?;
    let config = TrainConfig {
        lr0: 1e-3,
        max_epochs: epochs,
        seed: spec.seed,
        ..TrainConfig::default()
    };

    let t = Instant::now();
    let stage1 = train_model(
        build_densenet(&DenseNetConfig::toy(), spec.seed)?,
        &data.for_stage(&classes, Stage::Binary)?,
        &config,
        Some(classes.clone()),
    )?;
    println!("stage 1: {:.1}s, best {:?}", t.elapsed().as_secs_f64(), stage1.best.history.last());

    let t = Instant::now();
    let stage2 = train_model(
        build_levit(&LeViTConfig::toy(), spec.seed)?,
        &data.for_stage(&classes, Stage::Family)?,
        &config,
        Some(classes.clone()),
    )?;
    println!("stage 2: {:.1}s, best {:?}", t.elapsed().as_secs_f64(), stage2.best.history.last());

    let dir = std::path::Path::new(&out).join("cascade");
    std::fs::create_dir_all(&dir)?;
    stage1.best.save(dir.join(STAGE1_FILE))?;
    stage2.best.save(dir.join(STAGE2_FILE))?;
    println!("saved {}", dir.display());

    let cascade = CascadeModel::from_models(stage1.best.model, stage2.best.model, classes)?;
    let report = evaluate(&cascade, &manifest, Some(Split::Val), 1)?;
    println!("end-to-end val accuracy {:.4}", report.accuracy);
    Ok(())
}
