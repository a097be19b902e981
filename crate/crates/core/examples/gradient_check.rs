//! Finite-difference check of both reduced networks, end to end through
//! the training-mode loss.
//!
//! ```text
//! cargo run --release --example gradient_check -- [seed]
//! ```

use std::time::Instant;

use levitmc::densenet::{build_densenet, DenseNetConfig};
use levitmc::levit::{build_levit, LeViTConfig};
use levitmc::model::ModelGraph;
use levitmc::tensor::{GradCheckConfig, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn check(name: &str, model: &ModelGraph, size: usize, seed: u64) -> levitmc::Result<bool> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = 4;
    let x = Tensor::from_fn(&[n, 3, size, size], |_| rng.gen_range(0.0..1.0));
    let labels: Vec<usize> = (0..n).map(|i| i % model.num_classes()).collect();
    let config = GradCheckConfig {
        tolerance: 1e-3,
        max_coords: Some(24),
        step: 1e-4,
        ..GradCheckConfig::default()
    };
    let t = Instant::now();
    let report = model.grad_check(&x, &labels, &config)?;
    let checked: usize = report.inputs.iter().map(|r| r.checked).sum();
    let skipped: usize = report.inputs.iter().map(|r| r.skipped).sum();
    println!(
        "{name:<8} max rel err {:.2e} over {checked} coords ({skipped} skipped at kinks) in {:.1}s",
        report.max_rel_err,
        t.elapsed().as_secs_f64()
    );
    Ok(report.passed())
}

fn main() -> levitmc::Result<()> {
    let seed = std::env::args().nth(1).map_or(0, |s| s.parse().expect("seed must be an integer"));
    let dense = build_densenet(&DenseNetConfig::reduced(), seed)?;
    let levit = build_levit(&LeViTConfig::reduced(), seed)?;
    let ok = check("densenet", &dense, DenseNetConfig::reduced().input_size, seed)?
        & check("levit", &levit, LeViTConfig::reduced().input_size, seed)?;
    println!("{}", if ok { "all gradients agree" } else { "MISMATCH" });
    std::process::exit(if ok { 0 } else { 1 });
}
