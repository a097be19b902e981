//! Prints parameter counts, token schedules and logits shapes of the
//! stage presets.
//!
//! ```text
//! cargo run --release --example inspect_models
//! ```

use levitmc::densenet::{build_densenet, DenseNetConfig};
use levitmc::levit::{build_levit, LeViTConfig};
use levitmc::model::{Mode, ModelGraph};
use levitmc::tensor::{Graph, Tensor};

fn describe(name: &str, model: &ModelGraph, size: usize) -> levitmc::Result<()> {
    let mut g = Graph::<f32>::new();
    let bound = model.bind(&mut g, |_| true);
    let x = g.constant(Tensor::full(&[1, 3, size, size], 0.5));
    let out = model.forward(&mut g, &bound, x, Mode::Eval)?;
    println!(
        "{name:<14} {:>3} tensors {:>7} scalars, logits {:?}, tokens per stage {:?}",
        model.params.len(),
        model.params.num_scalars(),
        g.value(out.logits).shape(),
        out.stage_tokens
    );
    Ok(())
}

fn main() -> levitmc::Result<()> {
    let dense = DenseNetConfig::default();
    println!("densenet default head width {}", dense.head_channels());
    describe("densenet toy", &build_densenet(&DenseNetConfig::toy(), 0)?, 224)?;

    let levit = LeViTConfig::default();
    println!("levit default token schedule {:?}", levit.token_schedule());
    describe("levit default", &build_levit(&levit, 0)?, 224)?;
    describe("levit toy", &build_levit(&LeViTConfig::toy(), 0)?, 224)?;
    Ok(())
}
